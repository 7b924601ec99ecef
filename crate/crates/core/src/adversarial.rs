//! Gradient-ascent input perturbation with nearest-token projection.
//!
//! Starting from the prompt's embedding rows, each iteration moves the rows
//! a fixed Frobenius distance `ε` along the gradient of the ground-truth
//! output's negative log-likelihood, snaps every row to its nearest
//! vocabulary embedding, and regenerates. The continuous rows carry over
//! between iterations, so small steps accumulate until a row crosses into
//! another token's neighbourhood.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, squared_distance, Matrix};
use crate::model::{embed, InputGradient, LanguageModel, ModelError, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    /// Step length in embedding space, must be positive.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub max_new_tokens: usize,
    /// Breaks exact ties in the nearest-token projection.
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig { epsilon: 0.05, max_iterations: 50, max_new_tokens: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub ground_truth_output: String,
    pub adversarial_output: String,
    pub perturbed_input: String,
    pub iterations: usize,
    pub fooled: bool,
    pub epsilon: f64,
    pub max_iterations: usize,
}

/// One ascent step: `rows + ε · g / ‖g‖_F` with `g` the gradient at `rows`.
/// A zero gradient leaves the rows unchanged. Also returns the gradient.
pub fn ascent_step<M: LanguageModel + ?Sized>(
    model: &M,
    rows: &Matrix,
    target: &[TokenId],
    epsilon: f64,
) -> Result<(Matrix, InputGradient), ModelError> {
    let grad = model.embedding_gradient(rows, target)?;
    let mut next = rows.clone();
    let norm = grad.rows.frobenius_norm();
    if norm > 0.0 {
        axpy(epsilon / norm, grad.rows.as_slice(), next.as_mut_slice());
    }
    Ok((next, grad))
}

/// Nearest non-special vocabulary token to each row (Euclidean). Exact ties
/// are broken uniformly at random with `rng`.
pub fn project_to_vocabulary(
    table: &Matrix,
    vocab: &Vocabulary,
    rows: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>, ModelError> {
    let candidates = vocab.content_ids();
    if candidates.is_empty() {
        return Err(ModelError::InvalidInput("vocabulary has no content tokens".to_string()));
    }
    let mut out = Vec::with_capacity(rows.rows());
    let mut tied = Vec::new();
    for row in rows.iter_rows() {
        let mut best = f64::INFINITY;
        tied.clear();
        for id in candidates.clone() {
            let dist = squared_distance(row, table.row(id as usize));
            if dist < best {
                best = dist;
                tied.clear();
                tied.push(id);
            } else if dist == best {
                tied.push(id);
            }
        }
        let pick = if tied.len() > 1 { (rng.next_u64() % tied.len() as u64) as usize } else { 0 };
        out.push(tied[pick]);
    }
    Ok(out)
}

/// Perturbs `prompt` until the model's greedy output changes or the
/// iteration budget runs out.
pub fn adversarial_attack<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &str,
    config: &AdversarialConfig,
) -> Result<AdversarialResult, ModelError> {
    if !(config.epsilon.is_finite() && config.epsilon > 0.0) {
        return Err(ModelError::InvalidInput("epsilon must be positive".to_string()));
    }
    let table = model.embeddings().ok_or_else(|| ModelError::Unsupported("input gradients".to_string()))?;
    let vocab = model.vocabulary();
    let tokens = model.tokenize(prompt).tokens;
    let truth_tokens = model.generate(&tokens, config.max_new_tokens)?;
    let truth = vocab.render_output(&truth_tokens);

    let mut result = AdversarialResult {
        ground_truth_output: truth.clone(),
        adversarial_output: truth.clone(),
        perturbed_input: prompt.to_string(),
        iterations: 0,
        fooled: false,
        epsilon: config.epsilon,
        max_iterations: config.max_iterations,
    };
    if config.max_iterations == 0 || tokens.is_empty() {
        return Ok(result);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = embed(model, &tokens)?;
    for iteration in 1..=config.max_iterations {
        rows = ascent_step(model, &rows, &truth_tokens, config.epsilon)?.0;
        let perturbed = project_to_vocabulary(table, vocab, &rows, &mut rng)?;
        let output = vocab.render_output(&model.generate(&perturbed, config.max_new_tokens)?);
        result.iterations = iteration;
        result.perturbed_input = vocab.detokenize(&perturbed).surface;
        if output != truth {
            result.adversarial_output = output;
            result.fooled = true;
            break;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn projection_picks_nearest_and_skips_specials() {
        let vocab = Vocabulary::from_words(["x", "y"]);
        let table = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let rows = Matrix::from_rows(&[[0.9, 0.2], [0.1, 0.1], [0.2, 0.8]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = project_to_vocabulary(&table, &vocab, &rows, &mut rng).unwrap();
        assert_eq!(ids[0], 3);
        assert_eq!(ids[2], 4);
        // [0.1, 0.1] is equidistant; either content token, never a special.
        assert!(ids[1] == 3 || ids[1] == 4);
    }

    #[test]
    fn ties_depend_only_on_seed() {
        let vocab = Vocabulary::from_words(["x", "y"]);
        let table = Matrix::from_rows(&[[9.0], [9.0], [9.0], [1.0], [-1.0]]).unwrap();
        let rows = Matrix::from_rows(&vec![[0.0]; 32]).unwrap();
        let run = |seed| project_to_vocabulary(&table, &vocab, &rows, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(5), run(5));
        let picks = run(5);
        assert!(picks.contains(&3) && picks.contains(&4));
    }
}
