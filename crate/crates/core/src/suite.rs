//! Strategy-style metric dispatch.
//!
//! Each metric implements [`Metric`] and is looked up by name in a
//! [`MetricRegistry`]. Running a selection evaluates every requested metric
//! independently; a failing or unknown metric is recorded as a
//! [`MetricFailure`] and the others still run.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::OnceCell;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_attack, AdversarialConfig, AdversarialResult};
use crate::metrics::{accuracy_score, perplexity, rouge_n, RougeScore};
use crate::model::{LanguageModel, ModelError};
use crate::saliency::{saliency_map, SaliencyMap};

pub const ACCURACY: &str = "accuracy";
pub const ROUGE: &str = "rouge";
pub const PERPLEXITY: &str = "perplexity";
pub const SALIENCY: &str = "saliency";
pub const ADVERSARIAL: &str = "adversarial";

/// The built-in metrics, in display order.
pub const STANDARD_METRICS: [&str; 5] = [ACCURACY, ROUGE, PERPLEXITY, SALIENCY, ADVERSARIAL];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationPair {
    pub input: String,
    pub expected_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// ROUGE orders to report.
    pub rouge_n: Vec<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for MetricParams {
    fn default() -> Self {
        let adv = AdversarialConfig::default();
        MetricParams {
            epsilon: adv.epsilon,
            max_iterations: adv.max_iterations,
            rouge_n: vec![1, 2],
            max_new_tokens: adv.max_new_tokens,
            seed: adv.seed,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err("epsilon must be positive".to_string());
        }
        if self.rouge_n.is_empty() || self.rouge_n.contains(&0) {
            return Err("rouge_n must list orders of at least 1".to_string());
        }
        Ok(())
    }

    pub fn adversarial(&self) -> AdversarialConfig {
        AdversarialConfig {
            epsilon: self.epsilon,
            max_iterations: self.max_iterations,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        }
    }
}

/// Result of one metric over a dataset. Scalar scores are arithmetic means
/// over pairs; gradient metrics keep one record per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricOutcome {
    Accuracy {
        mean: f64,
        per_pair: Vec<f64>,
    },
    Rouge {
        /// Mean precision, recall and F1 per order `n`.
        #[serde(with = "order_keys")]
        by_order: BTreeMap<usize, RougeScore>,
    },
    Perplexity {
        #[serde(with = "float_repr")]
        mean: f64,
        #[serde(with = "float_repr::seq")]
        per_pair: Vec<f64>,
    },
    Saliency {
        maps: Vec<SaliencyMap>,
    },
    Adversarial {
        results: Vec<AdversarialResult>,
    },
    /// Named scalar scores, for metrics outside the built-in set.
    Scores {
        values: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFailure {
    pub reason: FailureReason,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    UnknownMetric,
    Unsupported,
    InvalidInput,
    Backend,
}

impl MetricFailure {
    pub fn unknown(name: &str) -> Self {
        MetricFailure { reason: FailureReason::UnknownMetric, message: alloc::format!("unknown metric `{name}`") }
    }
}

impl From<ModelError> for MetricFailure {
    fn from(e: ModelError) -> Self {
        let reason = match e {
            ModelError::Unsupported(_) => FailureReason::Unsupported,
            ModelError::InvalidInput(_) => FailureReason::InvalidInput,
            ModelError::Backend(_) => FailureReason::Backend,
        };
        MetricFailure { reason, message: e.to_string() }
    }
}

impl fmt::Display for MetricFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Shared inputs of one suite run. Greedy outputs for the dataset are
/// generated at most once and reused by every metric that needs them.
pub struct EvalContext<'a> {
    pub model: &'a dyn LanguageModel,
    pub pairs: &'a [EvaluationPair],
    pub params: &'a MetricParams,
    outputs: OnceCell<Result<Vec<String>, ModelError>>,
}

impl<'a> EvalContext<'a> {
    pub fn new(model: &'a dyn LanguageModel, pairs: &'a [EvaluationPair], params: &'a MetricParams) -> Self {
        EvalContext { model, pairs, params, outputs: OnceCell::new() }
    }

    /// Greedy output for each pair's input.
    pub fn outputs(&self) -> Result<&[String], ModelError> {
        self.outputs
            .get_or_init(|| {
                self.pairs
                    .iter()
                    .map(|p| {
                        let prompt = self.model.tokenize(&p.input).tokens;
                        let generated = self.model.generate(&prompt, self.params.max_new_tokens)?;
                        Ok(self.model.vocabulary().render_output(&generated))
                    })
                    .collect()
            })
            .as_deref()
            .map_err(Clone::clone)
    }
}

pub trait Metric: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure>;
}

pub struct AccuracyMetric;
pub struct RougeMetric;
pub struct PerplexityMetric;
pub struct SaliencyMetric;
pub struct AdversarialMetric;

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl Metric for AccuracyMetric {
    fn name(&self) -> &str {
        ACCURACY
    }

    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure> {
        let outputs = ctx.outputs()?;
        let per_pair: Vec<f64> =
            outputs.iter().zip(ctx.pairs).map(|(out, pair)| accuracy_score(out, &pair.expected_output)).collect();
        Ok(MetricOutcome::Accuracy { mean: mean(&per_pair), per_pair })
    }
}

impl Metric for RougeMetric {
    fn name(&self) -> &str {
        ROUGE
    }

    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure> {
        let outputs = ctx.outputs()?;
        let mut by_order = BTreeMap::new();
        for &n in &ctx.params.rouge_n {
            let mut sums = (0.0, 0.0, 0.0);
            for (out, pair) in outputs.iter().zip(ctx.pairs) {
                let s = rouge_n(out, &pair.expected_output, n).ok_or_else(|| MetricFailure {
                    reason: FailureReason::InvalidInput,
                    message: "rouge order must be at least 1".to_string(),
                })?;
                sums.0 += s.precision;
                sums.1 += s.recall;
                sums.2 += s.f1;
            }
            let count = outputs.len() as f64;
            by_order.insert(n, RougeScore { precision: sums.0 / count, recall: sums.1 / count, f1: sums.2 / count });
        }
        Ok(MetricOutcome::Rouge { by_order })
    }
}

impl Metric for PerplexityMetric {
    fn name(&self) -> &str {
        PERPLEXITY
    }

    /// Perplexity of each pair's expected output.
    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure> {
        let per_pair = ctx
            .pairs
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                perplexity(ctx.model, &pair.expected_output).map_err(|e| match e {
                    crate::metrics::PerplexityError::Model(m) => MetricFailure::from(m),
                    other => MetricFailure { reason: FailureReason::InvalidInput, message: alloc::format!("pair {i}: {other}") },
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(MetricOutcome::Perplexity { mean: mean(&per_pair), per_pair })
    }
}

impl Metric for SaliencyMetric {
    fn name(&self) -> &str {
        SALIENCY
    }

    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure> {
        let maps =
            ctx.pairs.iter().map(|p| saliency_map(ctx.model, &p.input, ctx.params.max_new_tokens)).collect::<Result<_, _>>()?;
        Ok(MetricOutcome::Saliency { maps })
    }
}

impl Metric for AdversarialMetric {
    fn name(&self) -> &str {
        ADVERSARIAL
    }

    fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure> {
        let config = ctx.params.adversarial();
        let results = ctx.pairs.iter().map(|p| adversarial_attack(ctx.model, &p.input, &config)).collect::<Result<_, _>>()?;
        Ok(MetricOutcome::Adversarial { results })
    }
}

pub type SuiteResults = BTreeMap<String, Result<MetricOutcome, MetricFailure>>;

#[derive(Default)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, Box<dyn Metric>>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding the five built-in metrics.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(AccuracyMetric));
        r.register(Box::new(RougeMetric));
        r.register(Box::new(PerplexityMetric));
        r.register(Box::new(SaliencyMetric));
        r.register(Box::new(AdversarialMetric));
        r
    }

    /// Adds or replaces the metric registered under `metric.name()`.
    pub fn register(&mut self, metric: Box<dyn Metric>) {
        self.metrics.insert(metric.name().to_string(), metric);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.metrics.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.keys().map(String::as_str)
    }

    /// Evaluates each selected metric once. The dataset must be non-empty.
    pub fn run<S: AsRef<str>>(
        &self,
        model: &dyn LanguageModel,
        pairs: &[EvaluationPair],
        selection: &[S],
        params: &MetricParams,
    ) -> SuiteResults {
        self.run_observed(model, pairs, selection, params, |_, _| {})
    }

    /// Like [`run`](Self::run), calling `done(k, name)` after the `k`-th
    /// metric (1-based) finishes.
    pub fn run_observed<S: AsRef<str>>(
        &self,
        model: &dyn LanguageModel,
        pairs: &[EvaluationPair],
        selection: &[S],
        params: &MetricParams,
        mut done: impl FnMut(usize, &str),
    ) -> SuiteResults {
        let ctx = EvalContext::new(model, pairs, params);
        let mut results = BTreeMap::new();
        for (k, name) in selection.iter().enumerate() {
            let name = name.as_ref();
            let outcome = match self.metrics.get(name) {
                _ if pairs.is_empty() => {
                    Err(MetricFailure { reason: FailureReason::InvalidInput, message: "dataset has no pairs".to_string() })
                }
                Some(metric) => metric.evaluate(&ctx),
                None => Err(MetricFailure::unknown(name)),
            };
            results.insert(name.to_string(), outcome);
            done(k + 1, name);
        }
        results
    }
}

/// Integer map keys written as strings; accepts the same on input.
mod order_keys {
    use super::*;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, RougeScore>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, RougeScore>, D::Error> {
        BTreeMap::<String, RougeScore>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|n| (n, v)).map_err(|_| D::Error::custom("rouge order must be an integer")))
            .collect()
    }
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`
/// (JSON has no representation for them); accepts numbers or those strings.
pub mod float_repr {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else if value.is_nan() {
            s.serialize_str("nan")
        } else if *value > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    struct FloatVisitor;

    impl<'de> Visitor<'de> for FloatVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
            f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(FloatVisitor)
    }

    pub mod seq {
        use alloc::vec::Vec;
        use serde::de::Deserializer;
        use serde::ser::{SerializeSeq, Serializer};
        use serde::{Deserialize, Serialize};

        #[derive(Serialize, Deserialize)]
        struct Wrapped(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(values.len()))?;
            for v in values {
                seq.serialize_element(&Wrapped(*v))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Wrapped>::deserialize(d)?.into_iter().map(|w| w.0).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TokenId, Vocabulary};

    /// Echoes nothing: always emits `</s>` immediately.
    struct Silent(Vocabulary);

    impl LanguageModel for Silent {
        fn vocabulary(&self) -> &Vocabulary {
            &self.0
        }
        fn logits(&self, _: &[TokenId]) -> Result<Vec<f64>, ModelError> {
            let mut l = vec![0.0; self.0.len()];
            l[crate::model::EOS as usize] = 10.0;
            Ok(l)
        }
    }

    fn pairs(expected: &str, n: usize) -> Vec<EvaluationPair> {
        (0..n).map(|_| EvaluationPair { input: "a b".to_string(), expected_output: expected.to_string() }).collect()
    }

    #[test]
    fn unknown_metric_isolated() {
        let model = Silent(Vocabulary::from_words(["a", "b"]));
        let res = MetricRegistry::standard().run(&model, &pairs("", 2), &["accuracy", "bogus"], &MetricParams::default());
        assert_eq!(res.len(), 2);
        assert_eq!(res["accuracy"], Ok(MetricOutcome::Accuracy { mean: 1.0, per_pair: vec![1.0, 1.0] }));
        assert_eq!(res["bogus"].as_ref().unwrap_err().reason, FailureReason::UnknownMetric);
    }

    #[test]
    fn gradient_metrics_unsupported_without_embeddings() {
        let model = Silent(Vocabulary::from_words(["a", "b"]));
        let res = MetricRegistry::standard().run(&model, &pairs("a b", 1), &STANDARD_METRICS, &MetricParams::default());
        assert_eq!(res[SALIENCY].as_ref().unwrap_err().reason, FailureReason::Unsupported);
        assert_eq!(res[ADVERSARIAL].as_ref().unwrap_err().reason, FailureReason::Unsupported);
        assert!(res[ACCURACY].is_ok() && res[ROUGE].is_ok() && res[PERPLEXITY].is_ok());
    }

    struct LengthMetric;

    impl Metric for LengthMetric {
        fn name(&self) -> &str {
            "output_length"
        }
        fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<MetricOutcome, MetricFailure> {
            let total: usize = ctx.outputs()?.iter().map(String::len).sum();
            let mut values = BTreeMap::new();
            values.insert("chars".to_string(), total as f64);
            Ok(MetricOutcome::Scores { values })
        }
    }

    #[test]
    fn registry_accepts_new_metrics() {
        let mut reg = MetricRegistry::standard();
        reg.register(Box::new(LengthMetric));
        assert_eq!(reg.names().count(), 6);
        let model = Silent(Vocabulary::from_words(["a"]));
        let res = reg.run(&model, &pairs("", 1), &["output_length"], &MetricParams::default());
        assert!(matches!(res["output_length"], Ok(MetricOutcome::Scores { .. })));
    }

    #[test]
    fn empty_dataset_fails_every_metric() {
        let model = Silent(Vocabulary::from_words(["a"]));
        let res = MetricRegistry::standard().run(&model, &[], &["accuracy"], &MetricParams::default());
        assert_eq!(res["accuracy"].as_ref().unwrap_err().reason, FailureReason::InvalidInput);
    }

    #[test]
    fn params_validation() {
        assert!(MetricParams::default().validate().is_ok());
        assert!(MetricParams { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(MetricParams { rouge_n: vec![0], ..Default::default() }.validate().is_err());
    }
}
