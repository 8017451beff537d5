//! Causal-effect metrics, classical baselines and the per-split report.

mod baselines;
mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::LinalgError;

pub use baselines::{
    knn_cate, knn_predict_against, knn_predict_within, ols_lr1, ols_lr2, LinearFit, OlsLr1, OlsLr2,
};
pub use metrics::{att_error, att_from_dataset, ate_error, auc, pehe, policy_risk};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("metric unavailable: {0}")]
    Unavailable(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("treatment balance: {0}")]
    Balance(String),
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("underdetermined fit: {n} units for {params} parameters")]
    Underdetermined { n: usize, params: usize },
    #[error(transparent)]
    Numeric(#[from] LinalgError),
}

/// Predicted potential outcomes and their difference for a set of units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatePrediction {
    pub tau: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl CatePrediction {
    pub fn from_outcomes(y0: Vec<f64>, y1: Vec<f64>) -> Self {
        let tau = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        Self { tau, y0, y1 }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    /// Training plus validation units.
    In,
    /// Held-out test units.
    Out,
}

/// Metrics for one evaluation set. A metric the data cannot support (no
/// ground truth, non-binary outcomes, one label class) is `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sqrt_pehe: Option<f64>,
    pub ate_error: Option<f64>,
    pub att_error: Option<f64>,
    pub policy_risk: Option<f64>,
    pub auc: Option<f64>,
    pub split: SplitTag,
}

fn available(name: &str, r: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ MetricError::Length { .. }) => Err(e),
        Err(e) => {
            log::debug!("{name}: {e}");
            Ok(None)
        }
    }
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&y| y == 0.0 || y == 1.0)
}

/// Computes every metric the dataset supports. `att_true` overrides the
/// ATT derived from the dataset's own columns.
pub fn evaluate(
    ds: &Dataset,
    pred: &CatePrediction,
    split: SplitTag,
    att_true: Option<f64>,
) -> Result<MetricsReport, MetricError> {
    if pred.len() != ds.n() || pred.y0.len() != ds.n() || pred.y1.len() != ds.n() {
        return Err(MetricError::Length {
            expected: ds.n(),
            got: pred.len(),
        });
    }
    let truth = ds.tau_true();
    let (sqrt_pehe, ate) = match &truth {
        Some(tau) => (
            available("pehe", pehe(tau, &pred.tau))?,
            available("ate", ate_error(tau, &pred.tau))?,
        ),
        None => (None, None),
    };
    let att = available("att", att_error(ds, &pred.tau, att_true))?;
    let risk = available("policy risk", policy_risk(ds, &pred.tau, None))?;

    // AUC over all observed potential outcomes when the counterfactual is
    // known, otherwise over factual outcomes only
    let auc_value = if let Some((y0, y1)) = ds.potential_outcomes() {
        if is_binary(&y0) && is_binary(&y1) {
            let scores: Vec<f64> = pred.y0.iter().chain(&pred.y1).copied().collect();
            let labels: Vec<u8> = y0.iter().chain(&y1).map(|&y| y as u8).collect();
            available("auc", auc(&scores, &labels))?
        } else {
            None
        }
    } else if is_binary(ds.yf()) {
        let scores: Vec<f64> = (0..ds.n())
            .map(|i| if ds.t()[i] == 1 { pred.y1[i] } else { pred.y0[i] })
            .collect();
        let labels: Vec<u8> = ds.yf().iter().map(|&y| y as u8).collect();
        available("auc", auc(&scores, &labels))?
    } else {
        None
    };

    Ok(MetricsReport {
        sqrt_pehe,
        ate_error: ate,
        att_error: att,
        policy_risk: risk,
        auc: auc_value,
        split,
    })
}
