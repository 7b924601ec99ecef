//! Gradient saliency over prompt tokens.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::norm;
use crate::model::{LanguageModel, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyEntry {
    /// Token text as it appears in the prompt.
    pub token: String,
    /// L2 norm of the loss gradient at this token's embedding.
    pub raw: f64,
    /// `raw` min-max scaled to `[0, 1]`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub prompt: String,
    /// Greedy output whose likelihood the scores explain.
    pub output: String,
    pub entries: Vec<SaliencyEntry>,
}

/// Min-max scaling. When every score is equal (including a single score)
/// all outputs are 1.0.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return raw.iter().map(|_| 1.0).collect();
    }
    raw.iter().map(|s| (s - min) / (max - min)).collect()
}

/// Generates greedily from `prompt`, then scores each prompt token by the
/// gradient norm of the output's total negative log-likelihood with respect
/// to that token's embedding.
pub fn saliency_map<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<SaliencyMap, ModelError> {
    // Fail before generating if the model cannot differentiate.
    if model.embeddings().is_none() {
        return Err(ModelError::Unsupported("input gradients".to_string()));
    }
    let seq = model.tokenize(prompt);
    if seq.tokens.is_empty() {
        return Err(ModelError::InvalidInput("prompt has no tokens".to_string()));
    }
    let generated = model.generate(&seq.tokens, max_new_tokens)?;
    let grad = model.input_gradient(&seq.tokens, &generated)?;
    let raw: Vec<f64> = grad.rows.iter_rows().map(norm).collect();
    let normalized = normalize_scores(&raw);
    let entries = seq
        .pieces()
        .zip(raw.iter().zip(&normalized))
        .map(|(token, (&raw, &normalized))| SaliencyEntry { token: token.to_string(), raw, normalized })
        .collect();
    Ok(SaliencyMap { prompt: prompt.to_string(), output: model.vocabulary().render_output(&generated), entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_scores(&[3.0]), [1.0]);
        assert_eq!(normalize_scores(&[2.0, 2.0]), [1.0, 1.0]);
        assert_eq!(normalize_scores(&[1.0, 3.0, 2.0]), [0.0, 1.0, 0.5]);
        assert!(normalize_scores(&[]).is_empty());
    }
}
