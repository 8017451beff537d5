use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::{AssignmentSpec, LinearOutcomeSpec, ToyOutcome};
use crate::model::{AbceiConfig, AbceiVariant};

pub const DEPTH_RANGE: std::ops::RangeInclusive<usize> = 1..=6;
pub const WIDTHS: [usize; 5] = [50, 100, 200, 300, 500];
pub const BATCH_SIZES: [usize; 6] = [65, 80, 100, 200, 300, 500];
pub const LAMBDAS: [f64; 3] = [1e-3, 1e-4, 5e-5];
pub const BETAS: [f64; 4] = [1.0, 5.0, 10.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMi,
    NoAdversarial,
    OlsLr1,
    OlsLr2,
    Knn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoMi,
        Variant::NoAdversarial,
        Variant::OlsLr1,
        Variant::OlsLr2,
        Variant::Knn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMi => "no_mi",
            Variant::NoAdversarial => "no_adversarial",
            Variant::OlsLr1 => "ols_lr1",
            Variant::OlsLr2 => "ols_lr2",
            Variant::Knn => "knn",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ExperimentError> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                ExperimentError::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// The ABCEI variant, or `None` for a classical baseline.
    pub fn abcei(self) -> Option<AbceiVariant> {
        match self {
            Variant::Full => Some(AbceiVariant::Full),
            Variant::NoMi => Some(AbceiVariant::NoMi),
            Variant::NoAdversarial => Some(AbceiVariant::NoAdversarial),
            _ => None,
        }
    }
}

/// Where each replication's data comes from. Generators are seeded with
/// the replication seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    ToyBias {
        n_control: usize,
        n_treated: usize,
        k: usize,
        /// `μ₁ = offset·1`, `μ₀ = 0`. Ignored when `kl_target` is set.
        #[serde(default)]
        offset: f64,
        /// Solve for the offset giving this group KL divergence.
        #[serde(default)]
        kl_target: Option<f64>,
        #[serde(default)]
        outcome: ToyOutcome,
    },
    LinearOutcomes {
        n: usize,
        k: usize,
        #[serde(default)]
        spec: LinearOutcomeSpec,
    },
    Csv {
        path: PathBuf,
        /// Redraw treatment per replication (needs `ycf`).
        #[serde(default)]
        reassign: Option<AssignmentSpec>,
        /// Externally known ATT, e.g. from a randomized component.
        #[serde(default)]
        att_true: Option<f64>,
    },
}

fn default_replications() -> usize {
    1
}

fn default_knn_k() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: AbceiConfig,
    pub variant: Variant,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Where files go. Not serialized, so recorded configs (and therefore
    /// output bytes) do not depend on the output location.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    /// Skip the search-space bounds on model hyper-parameters.
    #[serde(default)]
    pub allow_out_of_range: bool,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource, model: AbceiConfig, variant: Variant) -> Self {
        Self {
            dataset,
            model,
            variant,
            replications: 1,
            base_seed: 0,
            output_dir: None,
            allow_out_of_range: false,
            knn_k: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let c: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.replications as u64).map(|i| self.base_seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.knn_k == 0 {
            return bad("knn_k must be at least 1".into());
        }
        match &self.dataset {
            DatasetSource::ToyBias {
                n_control,
                n_treated,
                k,
                offset,
                kl_target,
                ..
            } => {
                if *n_control == 0 || *n_treated == 0 || *k == 0 {
                    return bad("toy_bias needs n_control, n_treated, k >= 1".into());
                }
                if !offset.is_finite() || kl_target.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
                    return bad("toy_bias offset must be finite and kl_target >= 0".into());
                }
            }
            DatasetSource::LinearOutcomes { n, k, .. } => {
                if *n < 10 || *k == 0 {
                    return bad("linear_outcomes needs n >= 10 and k >= 1".into());
                }
            }
            DatasetSource::Csv { .. } => {}
        }
        if self.variant.abcei().is_some() {
            self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
            if !self.allow_out_of_range {
                check_search_space(&self.model)?;
            }
        }
        Ok(())
    }
}

/// Rejects hyper-parameters outside the documented search space.
pub fn check_search_space(m: &AbceiConfig) -> Result<(), ExperimentError> {
    let mut problems = Vec::new();
    for (name, d) in [
        ("encoder_depth", m.encoder_depth),
        ("mi_depth", m.mi_depth),
        ("disc_depth", m.disc_depth),
        ("pred_depth", m.pred_depth),
    ] {
        if !DEPTH_RANGE.contains(&d) {
            problems.push(format!("{name} = {d} not in 1..=6"));
        }
    }
    for (name, w) in [
        ("encoder_width", m.encoder_width),
        ("mi_width", m.mi_width),
        ("disc_width", m.disc_width),
        ("pred_width", m.pred_width),
        ("latent_dim", m.latent_dim),
    ] {
        if !WIDTHS.contains(&w) {
            problems.push(format!("{name} = {w} not in {WIDTHS:?}"));
        }
    }
    if !BATCH_SIZES.contains(&m.batch_size) {
        problems.push(format!("batch_size = {} not in {BATCH_SIZES:?}", m.batch_size));
    }
    if !LAMBDAS.iter().any(|l| (l - m.lambda).abs() <= 1e-12 * l) {
        problems.push(format!("lambda = {} not in {LAMBDAS:?}", m.lambda));
    }
    if !BETAS.contains(&m.beta) {
        problems.push(format!("beta = {} not in {BETAS:?}", m.beta));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ExperimentError::Config(format!(
            "outside the search space (set allow_out_of_range to override): {}",
            problems.join("; ")
        )))
    }
}
