//! Evaluation core for the quality-management platform.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (only `alloc` is required). IO, persistence, and the
//! HTTP services live in the companion `qms` crate.
//!
//! The main pieces:
//!
//! - [`text`]: normalization used by the text-overlap metrics.
//! - [`metrics`]: accuracy, ROUGE-n and perplexity.
//! - [`model`]: the [`LanguageModel`](model::LanguageModel) contract every
//!   evaluated model implements, plus vocabulary and tokenization.
//! - [`reference`]: a small log-bilinear language model with exact input
//!   gradients, trainable from a text corpus.
//! - [`saliency`] and [`adversarial`]: the two gradient-based metrics.
//! - [`memory`]: accelerator memory estimates from parameter counts.
//! - [`suite`]: strategy-style dispatch over the metrics.
//! - [`risk`]: rule-table risk classification over a controlled vocabulary.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adversarial;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod risk;
pub mod saliency;
pub mod suite;
pub mod text;

pub use adversarial::{AdversarialConfig, AdversarialResult};
pub use memory::{MemoryEstimate, Precision};
pub use metrics::{accuracy_score, perplexity, rouge_n, RougeScore};
pub use model::{LanguageModel, ModelError, TokenId, TokenSequence, Vocabulary};
pub use reference::{ReferenceLm, TrainingConfig, TrainingError};
pub use risk::{Classification, RiskClass, RiskInput, RuleTable, VocabularyTerms};
pub use saliency::SaliencyMap;
pub use suite::{MetricOutcome, MetricParams, MetricRegistry};
