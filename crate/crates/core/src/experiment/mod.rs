//! Replicated experiments: dataset construction, training, evaluation on
//! both splits, aggregation and file output.
//!
//! In-sample metrics are computed on the training and validation units
//! together, out-of-sample metrics on the held-out test units.

mod config;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    gaussian_covariates, gen_linear_outcomes, gen_toy_bias, load_csv, reassign_treatment, split, DataError,
    Dataset, SplitSpec, Splits, ToyBiasSpec,
};
use crate::eval::{
    evaluate, knn_predict_against, knn_predict_within, CatePrediction, MetricError, MetricsReport, OlsLr1, OlsLr2,
    SplitTag,
};
use crate::model::{ablate, AbceiModel, ModelError};

pub use config::{
    check_search_space, DatasetSource, ExperimentConfig, Variant, BATCH_SIZES, BETAS, DEPTH_RANGE, LAMBDAS, WIDTHS,
};
pub use sweep::{median, sweep_bias, trace_mi, write_sweep_csv, write_trace_mi_csv, SweepAxis, SweepRow, TraceMiRow};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("all {0} replications failed")]
    AllFailed(usize),
    #[error("output error: {0}")]
    Output(String),
}

impl ExperimentError {
    /// Errors that abort an experiment instead of failing one replication.
    fn is_fatal(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Data(_) | ExperimentError::Output(_))
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for ExperimentError {
    fn from(e: serde_json::Error) -> Self {
        ExperimentError::Output(e.to_string())
    }
}

/// Builds the dataset for one replication seed.
pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<Dataset, ExperimentError> {
    Ok(match source {
        DatasetSource::ToyBias {
            n_control,
            n_treated,
            k,
            offset,
            kl_target,
            outcome,
        } => {
            let base = ToyBiasSpec {
                n_control: *n_control,
                n_treated: *n_treated,
                k: *k,
                mu0: vec![0.0; *k],
                mu1: vec![0.0; *k],
                seed,
                outcome: *outcome,
            };
            let offset = match kl_target {
                Some(kl) => base.structure()?.offset_for_kl(*kl)?,
                None => *offset,
            };
            gen_toy_bias(&base.with_offset(offset))?
        }
        DatasetSource::LinearOutcomes { n, k, spec } => gen_linear_outcomes(&gaussian_covariates(*n, *k, seed), spec, seed)?,
        DatasetSource::Csv { path, reassign, .. } => {
            let ds = load_csv(path)?;
            match reassign {
                Some(spec) => reassign_treatment(&ds, spec, seed)?,
                None => ds,
            }
        }
    })
}

fn att_override(source: &DatasetSource) -> Option<f64> {
    match source {
        DatasetSource::Csv { att_true, .. } => *att_true,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub seed: u64,
    pub variant: Variant,
    pub split_seed: u64,
    pub in_sample: MetricsReport,
    pub out_sample: MetricsReport,
    pub training: Option<TrainingSummary>,
    pub config: ExperimentConfig,
}

/// A replication's result plus what it produced along the way.
#[derive(Debug, Clone)]
pub struct ReplicationRun {
    pub result: ReplicationResult,
    pub splits: Splits,
    pub model: Option<AbceiModel>,
    pub in_pred: CatePrediction,
    pub out_pred: CatePrediction,
}

/// Fits the configured method on one split and predicts both evaluation
/// sets. ABCEI variants train on the training part and stop early on the
/// validation part; baselines fit on training plus validation.
pub fn fit_and_predict(
    config: &ExperimentConfig,
    splits: &Splits,
    seed: u64,
) -> Result<(CatePrediction, CatePrediction, Option<AbceiModel>, Option<TrainingSummary>), ExperimentError> {
    let in_sample = splits.in_sample();
    let test = &splits.test;
    Ok(match config.variant.abcei() {
        Some(v) => {
            let mut mc = ablate(&config.model, v);
            mc.seed = seed;
            let mut model = AbceiModel::new(mc, in_sample.k())?;
            let report = model.fit(&splits.train, &splits.val, |_, _| {})?;
            let summary = TrainingSummary {
                epochs_run: report.trace.len(),
                best_epoch: report.best_epoch,
                stopped_early: report.stopped_early,
            };
            (
                model.predict_outcomes(in_sample.x())?,
                model.predict_outcomes(test.x())?,
                Some(model),
                Some(summary),
            )
        }
        None => {
            let (a, b) = match config.variant {
                Variant::OlsLr1 => {
                    let f = OlsLr1::fit(&in_sample)?;
                    (f.predict(in_sample.x()), f.predict(test.x()))
                }
                Variant::OlsLr2 => {
                    let f = OlsLr2::fit(&in_sample)?;
                    (f.predict(in_sample.x()), f.predict(test.x()))
                }
                _ => (
                    knn_predict_within(&in_sample, config.knn_k)?,
                    knn_predict_against(&in_sample, test.x(), config.knn_k)?,
                ),
            };
            (a, b, None, None)
        }
    })
}

/// Generate or load, split, train, and evaluate both splits. Nothing is
/// written to disk.
pub fn run_replication(config: &ExperimentConfig, seed: u64) -> Result<ReplicationRun, ExperimentError> {
    let ds = load_dataset(&config.dataset, seed)?;
    let splits = split(&ds, &SplitSpec::new(seed))?;
    let (in_pred, out_pred, model, training) = fit_and_predict(config, &splits, seed)?;
    let att = att_override(&config.dataset);
    let in_sample = evaluate(&splits.in_sample(), &in_pred, SplitTag::In, att)?;
    let out_sample = evaluate(&splits.test, &out_pred, SplitTag::Out, att)?;
    Ok(ReplicationRun {
        result: ReplicationResult {
            seed,
            variant: config.variant,
            split_seed: splits.seed_used,
            in_sample,
            out_sample,
            training,
            config: config.clone(),
        },
        splits,
        model,
        in_pred,
        out_pred,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `rep_{seed}.json` and, for ABCEI variants, `model_{seed}.json`.
pub fn persist_replication(dir: &Path, run: &ReplicationRun) -> Result<(), ExperimentError> {
    let seed = run.result.seed;
    write_json(&dir.join(format!("rep_{seed}.json")), &run.result)?;
    if let Some(m) = &run.model {
        write_json(&dir.join(format!("model_{seed}.json")), &m.to_checkpoint())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over √count (0 for a single value).
    pub std_error: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Self {
            mean,
            std_error,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAggregate {
    pub sqrt_pehe: Option<Stat>,
    pub ate_error: Option<Stat>,
    pub att_error: Option<Stat>,
    pub policy_risk: Option<Stat>,
    pub auc: Option<Stat>,
}

impl SplitAggregate {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
            Stat::of(&v)
        };
        Self {
            sqrt_pehe: col(|r| r.sqrt_pehe),
            ate_error: col(|r| r.ate_error),
            att_error: col(|r| r.att_error),
            policy_risk: col(|r| r.policy_risk),
            auc: col(|r| r.auc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub completed: usize,
    pub failed: usize,
    pub failures: Vec<FailedReplication>,
    pub in_sample: SplitAggregate,
    pub out_sample: SplitAggregate,
    pub config: ExperimentConfig,
}

impl AggregateResult {
    /// Aggregates completed replications; `results` may come in any order.
    pub fn from_results(config: &ExperimentConfig, results: &[ReplicationResult], failures: Vec<FailedReplication>) -> Self {
        let mut sorted: Vec<&ReplicationResult> = results.iter().collect();
        sorted.sort_by_key(|r| r.seed);
        let ins: Vec<&MetricsReport> = sorted.iter().map(|r| &r.in_sample).collect();
        let outs: Vec<&MetricsReport> = sorted.iter().map(|r| &r.out_sample).collect();
        Self {
            variant: config.variant,
            seeds: config.seeds(),
            completed: sorted.len(),
            failed: failures.len(),
            failures,
            in_sample: SplitAggregate::of(&ins),
            out_sample: SplitAggregate::of(&outs),
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<ReplicationResult>,
    pub aggregate: AggregateResult,
}

/// Runs every replication seed (in parallel on `jobs` workers when
/// `jobs > 1`), persists per-replication files and the aggregate when an
/// output directory is configured. Diverged or otherwise failed
/// replications are recorded and excluded; config and data errors abort.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome, ExperimentError> {
    config.validate()?;
    let seeds = config.seeds();
    let run_one = |&seed: &u64| -> (u64, Result<ReplicationResult, ExperimentError>) {
        let r = run_replication(config, seed).and_then(|run| {
            if let Some(dir) = &config.output_dir {
                persist_replication(dir, &run)?;
            }
            Ok(run.result)
        });
        (seed, r)
    };
    let outcomes: Vec<(u64, Result<ReplicationResult, ExperimentError>)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(run_one).collect())
    } else {
        seeds.iter().map(run_one).collect()
    };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(res) => results.push(res),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::warn!("replication {seed} failed: {e}");
                failures.push(FailedReplication {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if results.is_empty() {
        return Err(ExperimentError::AllFailed(failures.len()));
    }
    let aggregate = AggregateResult::from_results(config, &results, failures);
    if let Some(dir) = &config.output_dir {
        write_json(&dir.join("aggregate.json"), &aggregate)?;
    }
    Ok(ExperimentOutcome { results, aggregate })
}

/// `#`-prefixed provenance lines for CSV outputs.
pub fn csv_header_lines(config: &ExperimentConfig, seeds: &[u64]) -> Result<String, ExperimentError> {
    Ok(format!(
        "# config: {}\n# seeds: {}\n",
        serde_json::to_string(config)?,
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    ))
}

pub fn output_path(config: &ExperimentConfig, name: &str) -> Option<PathBuf> {
    config.output_dir.as_ref().map(|d| d.join(name))
}

#[cfg(test)]
mod tests;
