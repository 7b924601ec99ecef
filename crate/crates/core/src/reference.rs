//! Log-bilinear n-gram language model.
//!
//! The next-token logit for word `w` after a window of `k` context tokens is
//!
//! ```text
//! logit_w = (Σ_i C_i · e_{ctx_i}) · e_w + b_w
//! ```
//!
//! where `e_*` are rows of one shared embedding table, `C_i` is a `d × d`
//! matrix per context slot (slot 0 is the oldest), and `b` a bias vector.
//! Histories shorter than `k` are left-padded with `<s>`. Gradients are
//! exact and closed-form, so the model doubles as a test bed for the
//! gradient-based metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{axpy, dot, Matrix};
use crate::model::{log_softmax, InputGradient, LanguageModel, ModelError, TokenId, Vocabulary, BOS, EOS};

pub const MIN_CORPUS_TOKENS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub embedding_dim: usize,
    /// Number of context tokens (the `n − 1` of an n-gram model).
    pub context_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { embedding_dim: 16, context_len: 3, epochs: 30, learning_rate: 0.05, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingError {
    CorpusTooSmall {
        tokens: usize,
    },
    /// Fewer than two distinct tokens.
    DegenerateCorpus,
    InvalidConfig(&'static str),
}

impl fmt::Display for TrainingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingError::CorpusTooSmall { tokens } => {
                write!(f, "corpus has {tokens} tokens, need at least {MIN_CORPUS_TOKENS}")
            }
            TrainingError::DegenerateCorpus => f.write_str("corpus has fewer than 2 distinct tokens"),
            TrainingError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
        }
    }
}

/// Mean corpus negative log-likelihood before and after training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_nll: f64,
    pub final_nll: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLm {
    vocab: Vocabulary,
    embeddings: Matrix,
    context: Vec<Matrix>,
    bias: Vec<f64>,
    corpus_digest: String,
}

/// One next-token prediction: `window` holds the preceding `k` ids.
struct Example {
    window: Vec<TokenId>,
    target: TokenId,
}

impl ReferenceLm {
    /// Assembles a model from explicit parameters. Shapes must agree: the
    /// embedding table has one row per vocabulary entry, every context
    /// matrix is `d × d`, and there is at least one context slot.
    pub fn from_parameters(
        vocab: Vocabulary,
        embeddings: Matrix,
        context: Vec<Matrix>,
        bias: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let d = embeddings.cols();
        if embeddings.rows() != vocab.len() || bias.len() != vocab.len() {
            return Err(ModelError::InvalidInput("embedding rows and bias must match vocabulary".into()));
        }
        if context.is_empty() || context.iter().any(|c| c.rows() != d || c.cols() != d) {
            return Err(ModelError::InvalidInput("context matrices must be d × d, at least one".into()));
        }
        Ok(ReferenceLm { vocab, embeddings, context, bias, corpus_digest: String::new() })
    }

    /// Trains on `corpus` (one sequence per non-empty line) by stochastic
    /// gradient descent on the mean next-token negative log-likelihood.
    /// Fully determined by `corpus` and `config`.
    pub fn train(corpus: &str, config: &TrainingConfig) -> Result<(Self, TrainingReport), TrainingError> {
        if config.embedding_dim < 2 {
            return Err(TrainingError::InvalidConfig("embedding_dim must be at least 2"));
        }
        if config.context_len < 1 {
            return Err(TrainingError::InvalidConfig("context_len must be at least 1"));
        }
        if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
            return Err(TrainingError::InvalidConfig("learning_rate must be positive"));
        }
        let vocab = Vocabulary::from_corpus(corpus);
        let lines: Vec<Vec<TokenId>> = corpus.lines().map(|l| vocab.tokenize(l).tokens).filter(|t| !t.is_empty()).collect();
        let total: usize = lines.iter().map(Vec::len).sum();
        if total < MIN_CORPUS_TOKENS {
            return Err(TrainingError::CorpusTooSmall { tokens: total });
        }
        if vocab.content_ids().len() < 2 {
            return Err(TrainingError::DegenerateCorpus);
        }

        let k = config.context_len;
        let mut examples = Vec::new();
        for line in &lines {
            let mut padded = vec![BOS; k];
            padded.extend_from_slice(line);
            padded.push(EOS);
            for p in k..padded.len() {
                examples.push(Example { window: padded[p - k..p].to_vec(), target: padded[p] });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embedding_dim;
        let v = vocab.len();
        let embeddings = Matrix::from_fn(v, d, |_, _| uniform(&mut rng) - 0.5);
        let scale = 1.0 / libm::sqrt(d as f64);
        let context = (0..k)
            .map(|_| Matrix::from_fn(d, d, |r, c| if r == c { 0.5 } else { 0.0 } + scale * (uniform(&mut rng) - 0.5)))
            .collect();
        let mut model = ReferenceLm { vocab, embeddings, context, bias: vec![0.0; v], corpus_digest: digest(corpus) };

        let initial_nll = model.mean_nll(&examples);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for _ in 0..config.epochs {
            shuffle(&mut order, &mut rng);
            for &i in &order {
                model.sgd_step(&examples[i], config.learning_rate);
            }
        }
        let final_nll = model.mean_nll(&examples);
        Ok((model, TrainingReport { initial_nll, final_nll, positions: examples.len() }))
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    pub fn context_matrices(&self) -> &[Matrix] {
        &self.context
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Hex SHA-256 of the training corpus; empty for hand-built models.
    pub fn corpus_digest(&self) -> &str {
        &self.corpus_digest
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.embedding_dim();
        self.embeddings.rows() * d + self.context.len() * d * d + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.is_finite() && self.context.iter().all(Matrix::is_finite) && self.bias.iter().all(|b| b.is_finite())
    }

    /// Mean next-token NLL over every line of `text`, scored the same way
    /// as during training.
    pub fn corpus_nll(&self, text: &str) -> f64 {
        let k = self.context_len();
        let mut total = 0.0;
        let mut count = 0usize;
        for line in text.lines() {
            let tokens = self.vocab.tokenize(line).tokens;
            if tokens.is_empty() {
                continue;
            }
            let mut padded = vec![BOS; k];
            padded.extend_from_slice(&tokens);
            padded.push(EOS);
            for p in k..padded.len() {
                let lp = log_softmax(&self.logits_for_window(&padded[p - k..p]));
                total -= lp[padded[p] as usize];
                count += 1;
            }
        }
        total / count as f64
    }

    fn window(&self, history: &[TokenId]) -> Vec<TokenId> {
        let k = self.context_len();
        let mut window = vec![BOS; k.saturating_sub(history.len())];
        window.extend_from_slice(&history[history.len().saturating_sub(k)..]);
        window
    }

    fn hidden(&self, rows: &[&[f64]]) -> Vec<f64> {
        let mut h = vec![0.0; self.embedding_dim()];
        for (c, row) in self.context.iter().zip(rows) {
            c.mul_vec_add(row, &mut h);
        }
        h
    }

    fn output_logits(&self, h: &[f64]) -> Vec<f64> {
        self.embeddings.iter_rows().zip(&self.bias).map(|(e, b)| dot(h, e) + b).collect()
    }

    fn logits_for_window(&self, window: &[TokenId]) -> Vec<f64> {
        let rows: Vec<&[f64]> = window.iter().map(|&t| self.embeddings.row(t as usize)).collect();
        self.output_logits(&self.hidden(&rows))
    }

    fn mean_nll(&self, examples: &[Example]) -> f64 {
        let total: f64 = examples.iter().map(|ex| -log_softmax(&self.logits_for_window(&ex.window))[ex.target as usize]).sum();
        total / examples.len() as f64
    }

    /// Residual `softmax(logits) − onehot(target)` and `Eᵀ · residual`.
    fn output_backward(&self, h: &[f64], target: TokenId) -> (f64, Vec<f64>, Vec<f64>) {
        let lp = log_softmax(&self.output_logits(h));
        let loss = -lp[target as usize];
        let mut residual: Vec<f64> = lp.into_iter().map(libm::exp).collect();
        residual[target as usize] -= 1.0;
        let mut dh = vec![0.0; self.embedding_dim()];
        self.embeddings.mul_transpose_vec_add(&residual, &mut dh);
        (loss, residual, dh)
    }

    fn sgd_step(&mut self, ex: &Example, lr: f64) {
        let rows: Vec<Vec<f64>> = ex.window.iter().map(|&t| self.embeddings.row(t as usize).to_vec()).collect();
        let row_refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let h = self.hidden(&row_refs);
        let (_, residual, dh) = self.output_backward(&h, ex.target);

        let d = self.embedding_dim();
        let input_grads: Vec<Vec<f64>> = self
            .context
            .iter()
            .map(|c| {
                let mut g = vec![0.0; d];
                c.mul_transpose_vec_add(&dh, &mut g);
                g
            })
            .collect();

        for (w, &r) in residual.iter().enumerate() {
            axpy(-lr * r, &h, self.embeddings.row_mut(w));
            self.bias[w] -= lr * r;
        }
        for ((&t, g), (c, row)) in ex.window.iter().zip(&input_grads).zip(self.context.iter_mut().zip(&rows)) {
            axpy(-lr, g, self.embeddings.row_mut(t as usize));
            for (a, &dha) in dh.iter().enumerate() {
                axpy(-lr * dha, row, c.row_mut(a));
            }
        }
    }
}

impl LanguageModel for ReferenceLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        check_ids(context, self.vocab.len())?;
        Ok(self.logits_for_window(&self.window(context)))
    }

    fn embeddings(&self) -> Option<&Matrix> {
        Some(&self.embeddings)
    }

    fn embedding_gradient(&self, prompt_rows: &Matrix, target: &[TokenId]) -> Result<InputGradient, ModelError> {
        let d = self.embedding_dim();
        if prompt_rows.rows() > 0 && prompt_rows.cols() != d {
            return Err(ModelError::InvalidInput(alloc::format!(
                "prompt rows have width {}, embeddings have {d}",
                prompt_rows.cols()
            )));
        }
        check_ids(target, self.vocab.len())?;

        // Position layout: k padding rows, then prompt rows, then target rows.
        let k = self.context_len();
        let prompt_len = prompt_rows.rows();
        let row_at = |pos: usize| -> &[f64] {
            if pos < k {
                self.embeddings.row(BOS as usize)
            } else if pos < k + prompt_len {
                prompt_rows.row(pos - k)
            } else {
                self.embeddings.row(target[pos - k - prompt_len] as usize)
            }
        };

        let mut loss = 0.0;
        let mut grads = Matrix::zeros(prompt_len, d);
        for (t, &y) in target.iter().enumerate() {
            let p = k + prompt_len + t;
            let rows: Vec<&[f64]> = (p - k..p).map(row_at).collect();
            let h = self.hidden(&rows);
            let (l, _, dh) = self.output_backward(&h, y);
            loss += l;
            for (slot, pos) in (p - k..p).enumerate() {
                if (k..k + prompt_len).contains(&pos) {
                    self.context[slot].mul_transpose_vec_add(&dh, grads.row_mut(pos - k));
                }
            }
        }
        Ok(InputGradient { loss, rows: grads })
    }
}

fn check_ids(ids: &[TokenId], vocab_len: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&t| t as usize >= vocab_len) {
        Some(t) => Err(ModelError::InvalidInput(alloc::format!("token id {t} out of range"))),
        None => Ok(()),
    }
}

/// Uniform draw in `[0, 1)` with 53 random bits.
fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

fn digest(corpus: &str) -> String {
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(corpus.as_bytes()) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax;

    fn alternating(n: usize) -> String {
        (0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn learns_alternation() {
        let corpus = alternating(50);
        for seed in [0, 1, 2] {
            let cfg = TrainingConfig { seed, ..TrainingConfig::default() };
            let (m, report) = ReferenceLm::train(&corpus, &cfg).unwrap();
            assert!(report.final_nll < report.initial_nll);
            let v = m.vocabulary();
            let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
            let p = softmax(&m.logits(&[b, a]).unwrap());
            assert!(p[b as usize] > p[a as usize], "seed {seed}");
            assert!(m.is_finite());
        }
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let corpus = alternating(60);
        let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
        let (m, report) = ReferenceLm::train(&corpus, &cfg).unwrap();
        assert_eq!(report.initial_nll, report.final_nll);
        let (m2, _) = ReferenceLm::train(&corpus, &cfg).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m.corpus_nll(&corpus), report.final_nll);
    }

    #[test]
    fn same_seed_same_bits() {
        let corpus = alternating(80);
        let cfg = TrainingConfig { epochs: 3, seed: 11, ..TrainingConfig::default() };
        let (m1, _) = ReferenceLm::train(&corpus, &cfg).unwrap();
        let (m2, _) = ReferenceLm::train(&corpus, &cfg).unwrap();
        let bits = |m: &ReferenceLm| m.embeddings.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m1), bits(&m2));
        assert_eq!(m1, m2);
        let (m3, _) = ReferenceLm::train(&corpus, &TrainingConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn corpus_errors() {
        let cfg = TrainingConfig::default();
        assert_eq!(ReferenceLm::train("a b c", &cfg).unwrap_err(), TrainingError::CorpusTooSmall { tokens: 3 });
        let same = vec!["a"; 60].join(" ");
        assert_eq!(ReferenceLm::train(&same, &cfg).unwrap_err(), TrainingError::DegenerateCorpus);
        let bad = TrainingConfig { embedding_dim: 1, ..cfg };
        assert!(matches!(ReferenceLm::train(&alternating(60), &bad), Err(TrainingError::InvalidConfig(_))));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn logits_follow_log_bilinear_form() {
        let (m, _) = ReferenceLm::train(&alternating(60), &TrainingConfig { epochs: 1, ..Default::default() }).unwrap();
        let ctx = [3, 4];
        let logits = m.logits(&ctx).unwrap();
        // window is [<s>, a, b]
        let window = [BOS, 3, 4];
        let d = m.embedding_dim();
        for w in 0..m.vocabulary().len() {
            let mut h = vec![0.0; d];
            for (slot, &t) in window.iter().enumerate() {
                let c = &m.context_matrices()[slot];
                for a in 0..d {
                    for b in 0..d {
                        h[a] += c.row(a)[b] * m.embeddings.row(t as usize)[b];
                    }
                }
            }
            let expect: f64 = h.iter().zip(m.embeddings.row(w)).map(|(x, y)| x * y).sum::<f64>() + m.bias()[w];
            assert!((logits[w] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let (m, _) = ReferenceLm::train(&alternating(60), &TrainingConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(matches!(m.logits(&[99]), Err(ModelError::InvalidInput(_))));
        assert!(matches!(m.input_gradient(&[3], &[99]), Err(ModelError::InvalidInput(_))));
    }

    #[test]
    fn from_parameters_checks_shapes() {
        let vocab = Vocabulary::from_words(["x"]);
        let ok = ReferenceLm::from_parameters(vocab.clone(), Matrix::zeros(4, 2), vec![Matrix::zeros(2, 2)], vec![0.0; 4]);
        assert!(ok.is_ok());
        assert_eq!(ok.unwrap().parameter_count(), 8 + 4 + 4);
        assert!(
            ReferenceLm::from_parameters(vocab.clone(), Matrix::zeros(3, 2), vec![Matrix::zeros(2, 2)], vec![0.0; 4]).is_err()
        );
        assert!(ReferenceLm::from_parameters(vocab.clone(), Matrix::zeros(4, 2), vec![], vec![0.0; 4]).is_err());
        assert!(ReferenceLm::from_parameters(vocab, Matrix::zeros(4, 2), vec![Matrix::zeros(3, 3)], vec![0.0; 4]).is_err());
    }
}
