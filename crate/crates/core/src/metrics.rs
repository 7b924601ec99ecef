//! Performance metrics: positional accuracy, ROUGE-n, and perplexity.

use alloc::collections::BTreeMap;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{log_softmax, LanguageModel, ModelError};
use crate::text::{ngrams, normalize_words};

/// Fraction of aligned positions whose normalized words agree, over the
/// longer of the two word sequences. Two texts with no words score 1.0.
pub fn accuracy_score(candidate: &str, reference: &str) -> f64 {
    let cand = normalize_words(candidate);
    let refr = normalize_words(reference);
    let longest = cand.len().max(refr.len());
    if longest == 0 {
        return 1.0;
    }
    let matches = cand.iter().zip(&refr).filter(|(c, r)| c == r).count();
    matches as f64 / longest as f64
}

/// Precision, recall and F1 of an n-gram overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    pub const PERFECT: RougeScore = RougeScore { precision: 1.0, recall: 1.0, f1: 1.0 };

    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        RougeScore { precision, recall, f1: f1(precision, recall) }
    }
}

/// Harmonic mean, defined as 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ROUGE-n with clipped multiset counts.
///
/// Identical normalized word sequences score (1, 1, 1) for every `n`, even
/// when they are shorter than `n`. Otherwise a side without any n-gram
/// yields all zeros. Returns `None` for `n == 0`.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Option<RougeScore> {
    if n == 0 {
        return None;
    }
    let cand = normalize_words(candidate);
    let refr = normalize_words(reference);
    if cand == refr {
        return Some(RougeScore::PERFECT);
    }
    let cand_counts = count_ngrams(&cand, n);
    let ref_counts = count_ngrams(&refr, n);
    let cand_total: usize = cand_counts.values().sum();
    let ref_total: usize = ref_counts.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return Some(RougeScore::ZERO);
    }
    let overlap: usize = cand_counts.iter().map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0))).sum();
    Some(RougeScore::from_precision_recall(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64))
}

fn count_ngrams(words: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    for gram in ngrams(words, n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub enum PerplexityError {
    /// Fewer than two tokens, so nothing is predicted.
    TooShort {
        tokens: usize,
    },
    Model(ModelError),
}

impl fmt::Display for PerplexityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerplexityError::TooShort { tokens } => {
                write!(f, "perplexity needs at least 2 tokens, got {tokens}")
            }
            PerplexityError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl From<ModelError> for PerplexityError {
    fn from(e: ModelError) -> Self {
        PerplexityError::Model(e)
    }
}

/// Perplexity of `text` under `model`: `exp` of the mean negative natural-log
/// likelihood of every token after the first, each conditioned on all tokens
/// before it. A zero-probability token gives `f64::INFINITY`.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, text: &str) -> Result<f64, PerplexityError> {
    let tokens = model.tokenize(text).tokens;
    if tokens.len() < 2 {
        return Err(PerplexityError::TooShort { tokens: tokens.len() });
    }
    let mut log_probs = alloc::vec::Vec::with_capacity(tokens.len() - 1);
    for i in 1..tokens.len() {
        let logits = model.logits(&tokens[..i])?;
        let lp = log_softmax(&logits);
        log_probs.push(lp.get(tokens[i] as usize).copied().unwrap_or(f64::NEG_INFINITY));
    }
    Ok(perplexity_from_log_probs(&log_probs))
}

/// `exp(-mean(log_probs))`; infinite if any entry is `-inf`. `NaN` for an
/// empty slice.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> f64 {
    if log_probs.contains(&f64::NEG_INFINITY) {
        return f64::INFINITY;
    }
    let mean_nll = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    libm::exp(mean_nll)
}
