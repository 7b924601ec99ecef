//! Brute-force search for an adversarial instance near a decision boundary.
#![allow(dead_code)]

use qms_core::adversarial::{adversarial_attack, AdversarialConfig, AdversarialResult};
use qms_core::model::{LanguageModel, TokenId};
use qms_core::{ReferenceLm, TrainingConfig};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct BoundaryInstance {
    pub model: ReferenceLm,
    pub prompt: Vec<TokenId>,
    pub config: AdversarialConfig,
    pub result: AdversarialResult,
}

/// Trains tiny models on random `a`/`b` corpora and tries every prompt of
/// up to three words until one is fooled within five iterations.
pub fn find_near_boundary_instance() -> Option<BoundaryInstance> {
    let config = AdversarialConfig { epsilon: 0.05, max_iterations: 5, max_new_tokens: 4, seed: 0 };
    for corpus_seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
        let corpus: String = (0..6)
            .map(|_| {
                let line: Vec<&str> = (0..10).map(|_| if rng.next_u32() % 2 == 0 { "a" } else { "b" }).collect();
                line.join(" ") + "\n"
            })
            .collect();
        let training = TrainingConfig { embedding_dim: 4, context_len: 3, epochs: 3, learning_rate: 0.05, seed: corpus_seed };
        let Ok((model, _)) = ReferenceLm::train(&corpus, &training) else { continue };
        for len in 1..=3usize {
            for bits in 0..(1u32 << len) {
                let words: Vec<&str> = (0..len).map(|i| if bits >> i & 1 == 0 { "a" } else { "b" }).collect();
                let text = words.join(" ");
                let result = adversarial_attack(&model, &text, &config).ok()?;
                if result.fooled && result.iterations <= 5 {
                    let prompt = model.tokenize(&text).tokens;
                    return Some(BoundaryInstance { model, prompt, config, result });
                }
            }
        }
    }
    None
}
