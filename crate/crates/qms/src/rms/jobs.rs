//! Asynchronous analysis jobs on a bounded worker pool.

use std::sync::Arc;

use qms_core::suite::{EvaluationPair, FailureReason, MetricFailure, MetricRegistry};
use qms_core::{MetricOutcome, MetricParams};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use tokio::sync::Semaphore;

use crate::http::{from_value, ApiResult, Clock};
use crate::store::{Filter, Store};

use super::models::ModelCache;

pub const JOBS: &str = "jobs";
pub const ANALYSES: &str = "analyses";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub user_id: String,
    pub analysis_id: String,
    pub state: JobState,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Stored result of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MetricEntry {
    Ok { result: MetricOutcome },
    Failed { reason: FailureReason, message: String },
}

impl From<Result<MetricOutcome, MetricFailure>> for MetricEntry {
    fn from(r: Result<MetricOutcome, MetricFailure>) -> Self {
        match r {
            Ok(result) => MetricEntry::Ok { result },
            Err(f) => MetricEntry::Failed { reason: f.reason, message: f.message },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub user_id: String,
    pub model_id: String,
    pub dataset_id: String,
    pub selected_metrics: Vec<String>,
    pub params: MetricParams,
    pub status: JobState,
    #[serde(default)]
    pub results: BTreeMap<String, MetricEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<chrono::DateTime<chrono::Utc>>,
}

pub struct JobRunner {
    store: Arc<Store>,
    models: Arc<ModelCache>,
    metrics: Arc<MetricRegistry>,
    permits: Arc<Semaphore>,
    clock: Arc<dyn Clock>,
}

impl JobRunner {
    pub fn new(
        store: Arc<Store>,
        models: Arc<ModelCache>,
        metrics: Arc<MetricRegistry>,
        workers: usize,
        clock: Arc<dyn Clock>,
    ) -> Self {
        JobRunner { store, models, metrics, permits: Arc::new(Semaphore::new(workers.max(1))), clock }
    }

    /// Recovers jobs left unfinished by a previous process: running jobs
    /// fail, pending jobs are scheduled again with pairs from `pairs_of`.
    pub fn recover(self: &Arc<Self>, pairs_of: impl Fn(&str) -> Option<Vec<EvaluationPair>>) -> ApiResult<usize> {
        let mut n = 0;
        for doc in self.store.query(JOBS, &Filter::new())? {
            let job: Job = from_value(doc.body.clone(), "job")?;
            let analysis = match self.store.get(ANALYSES, &job.analysis_id)? {
                Some(a) => from_value::<Analysis>(a.body, "analysis")?,
                None => continue,
            };
            let pairs = pairs_of(&analysis.dataset_id);
            match (job.state, pairs) {
                (JobState::Pending, Some(pairs)) => {
                    let runner = self.clone();
                    tokio::spawn(async move { runner.run(doc.id, job, analysis, pairs).await });
                }
                (JobState::Pending | JobState::Running, _) => {
                    let message = "interrupted by a service restart".to_string();
                    let job = Job { state: JobState::Running, ..job };
                    self.finish(&doc.id, &job, JobState::Failed, None, Some(message))?;
                }
                _ => continue,
            }
            n += 1;
        }
        Ok(n)
    }

    /// Persists a pending analysis and its job, then schedules the job.
    pub fn submit(
        self: &Arc<Self>,
        user_id: &str,
        model_id: &str,
        dataset_id: &str,
        pairs: Vec<EvaluationPair>,
        selection: Vec<String>,
        params: MetricParams,
    ) -> ApiResult<(String, String)> {
        let analysis = Analysis {
            user_id: user_id.to_string(),
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            selected_metrics: selection,
            params,
            status: JobState::Pending,
            results: BTreeMap::new(),
            error: None,
            completed_at: None,
        };
        let analysis_id = self.store.insert(ANALYSES, to_value(&analysis))?;
        let job = Job {
            user_id: user_id.to_string(),
            analysis_id: analysis_id.clone(),
            state: JobState::Pending,
            progress: 0.0,
            error: None,
        };
        let job_id = self.store.insert(JOBS, to_value(&job))?;
        let runner = self.clone();
        let id = job_id.clone();
        tokio::spawn(async move { runner.run(id, job, analysis, pairs).await });
        Ok((job_id, analysis_id))
    }

    async fn run(self: Arc<Self>, job_id: String, mut job: Job, analysis: Analysis, pairs: Vec<EvaluationPair>) {
        let Ok(_permit) = self.permits.clone().acquire_owned().await else {
            return;
        };
        job.state = JobState::Running;
        if let Err(e) = self.store.update(JOBS, &job_id, to_value(&job)) {
            tracing::error!(%job_id, "cannot mark job running: {e}");
            return;
        }
        let _ = self.set_analysis_status(&job.analysis_id, JobState::Running);

        let runner = self.clone();
        let (jid, mut progress_job, a) = (job_id.clone(), job.clone(), analysis.clone());
        let outcome = tokio::task::spawn_blocking(move || {
            let loaded = runner.models.load(&a.model_id).map_err(|e| format!("cannot load model: {e}"))?;
            let total = a.selected_metrics.len().max(1) as f64;
            let results = runner.metrics.run_observed(loaded.as_model(), &pairs, &a.selected_metrics, &a.params, |k, _| {
                progress_job.progress = k as f64 / total;
                if k < a.selected_metrics.len() {
                    let _ = runner.store.update(JOBS, &jid, to_value(&progress_job));
                }
            });
            Ok::<_, String>(results.into_iter().map(|(k, v)| (k, MetricEntry::from(v))).collect::<BTreeMap<_, _>>())
        })
        .await
        .unwrap_or_else(|e| Err(format!("worker crashed: {e}")));

        let result = match outcome {
            Ok(results) => self.finish(&job_id, &job, JobState::Done, Some(results), None),
            Err(message) => self.finish(&job_id, &job, JobState::Failed, None, Some(message)),
        };
        if let Err(e) = result {
            tracing::error!(%job_id, "cannot record job outcome: {e:?}");
        }
    }

    fn set_analysis_status(&self, analysis_id: &str, status: JobState) -> ApiResult<()> {
        let doc = self.store.get(ANALYSES, analysis_id)?.ok_or_else(|| crate::http::ApiError::not_found("analysis"))?;
        let mut a: Analysis = from_value(doc.body, "analysis")?;
        a.status = status;
        self.store.update(ANALYSES, analysis_id, to_value(&a))?;
        Ok(())
    }

    /// Writes the analysis, then the job. A job observed as done always has
    /// its results in place.
    fn finish(
        &self,
        job_id: &str,
        job: &Job,
        state: JobState,
        results: Option<BTreeMap<String, MetricEntry>>,
        error: Option<String>,
    ) -> ApiResult<()> {
        if let Some(doc) = self.store.get(ANALYSES, &job.analysis_id)? {
            let mut a: Analysis = from_value(doc.body, "analysis")?;
            a.status = state;
            a.results = results.unwrap_or_default();
            a.error = error.clone();
            a.completed_at = Some(self.clock.now());
            self.store.update(ANALYSES, &job.analysis_id, to_value(&a))?;
        }
        let done = Job { state, progress: if state == JobState::Done { 1.0 } else { job.progress }, error, ..job.clone() };
        self.store.update(JOBS, job_id, to_value(&done))?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or_else(|e| json!({"serialization_error": e.to_string()}))
}

#[cfg(test)]
mod tests {
    use super::*;
    use qms_core::RougeScore;

    #[test]
    fn nested_outcomes_round_trip() {
        let entries = [
            MetricEntry::Ok {
                result: MetricOutcome::Rouge { by_order: [(1, RougeScore::PERFECT), (2, RougeScore::ZERO)].into() },
            },
            MetricEntry::Ok { result: MetricOutcome::Perplexity { mean: f64::INFINITY, per_pair: vec![f64::INFINITY, 2.5] } },
            MetricEntry::Failed { reason: FailureReason::Unsupported, message: "no gradients".into() },
        ];
        for e in entries {
            let v = serde_json::to_value(&e).unwrap();
            let back: MetricEntry = serde_json::from_value(v).unwrap();
            assert_eq!(back, e);
        }
    }
}
