use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{
    csv_header_lines, load_dataset, run_experiment, DatasetSource, ExperimentConfig, ExperimentError, Stat, Variant,
};
use crate::data::{gaussian_kl, split, SplitSpec, ToyBiasSpec};
use crate::eval::pehe;
use crate::model::{ablate, AbceiModel, AbceiVariant, EpochRecord};

/// Bias levels of a sweep: either group KL targets (the offset is solved
/// per replication) or raw mean offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KlTargets(Vec<f64>),
    Offsets(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kl_target: Option<f64>,
    /// Mean over replications of the offset used.
    pub offset: f64,
    /// Mean over replications of the closed-form group KL.
    pub kl: f64,
    pub method: Variant,
    pub sqrt_pehe_in: Option<Stat>,
    pub sqrt_pehe_out: Option<Stat>,
    pub sqrt_pehe_out_median: Option<f64>,
    pub completed: usize,
    pub failed: usize,
    /// Out-of-sample √PEHE per completed seed, ordered by seed.
    pub per_seed_out: Vec<(u64, f64)>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Runs every method at every bias level on the toy generator.
pub fn sweep_bias(
    config: &ExperimentConfig,
    axis: &SweepAxis,
    methods: &[Variant],
    jobs: usize,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let DatasetSource::ToyBias {
        n_control,
        n_treated,
        k,
        outcome,
        ..
    } = config.dataset.clone()
    else {
        return Err(ExperimentError::Config("sweep-bias needs the toy_bias dataset".into()));
    };
    if methods.is_empty() {
        return Err(ExperimentError::Config("sweep-bias needs at least one method".into()));
    }
    let levels: Vec<(Option<f64>, f64)> = match axis {
        SweepAxis::KlTargets(v) => v.iter().map(|&kl| (Some(kl), 0.0)).collect(),
        SweepAxis::Offsets(v) => v.iter().map(|&o| (None, o)).collect(),
    };
    let mut rows = Vec::new();
    for &(kl_target, offset) in &levels {
        let dataset = DatasetSource::ToyBias {
            n_control,
            n_treated,
            k,
            offset,
            kl_target,
            outcome,
        };
        // offsets and KL per seed, independent of the method
        let mut offsets = Vec::new();
        let mut kls = Vec::new();
        for seed in config.seeds() {
            let base = ToyBiasSpec {
                n_control,
                n_treated,
                k,
                mu0: vec![0.0; k],
                mu1: vec![0.0; k],
                seed,
                outcome,
            };
            let structure = base.structure()?;
            let o = match kl_target {
                Some(kl) => structure.offset_for_kl(kl)?,
                None => offset,
            };
            let spec = base.with_offset(o);
            offsets.push(o);
            kls.push(gaussian_kl(&spec.mu0, &spec.mu1, &structure.covariance)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for &method in methods {
            let cell = ExperimentConfig {
                dataset: dataset.clone(),
                variant: method,
                output_dir: None,
                ..config.clone()
            };
            let (ins, outs, per_seed, completed, failed) = match run_experiment(&cell, jobs) {
                Ok(o) => {
                    let mut res = o.results;
                    res.sort_by_key(|r| r.seed);
                    let ins: Vec<f64> = res.iter().filter_map(|r| r.in_sample.sqrt_pehe).collect();
                    let per_seed: Vec<(u64, f64)> =
                        res.iter().filter_map(|r| r.out_sample.sqrt_pehe.map(|v| (r.seed, v))).collect();
                    let outs: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
                    (ins, outs, per_seed, o.aggregate.completed, o.aggregate.failed)
                }
                Err(ExperimentError::AllFailed(n)) => (vec![], vec![], vec![], 0, n),
                Err(e) => return Err(e),
            };
            rows.push(SweepRow {
                kl_target,
                offset: mean(&offsets),
                kl: mean(&kls),
                method,
                sqrt_pehe_in: Stat::of(&ins),
                sqrt_pehe_out: Stat::of(&outs),
                sqrt_pehe_out_median: median(&outs),
                completed,
                failed,
                per_seed_out: per_seed,
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(config: &ExperimentConfig, rows: &[SweepRow], mut out: W) -> Result<(), ExperimentError> {
    out.write_all(csv_header_lines(config, &config.seeds())?.as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| ExperimentError::Output(e.to_string());
    w.write_record([
        "kl_target",
        "offset",
        "kl",
        "method",
        "sqrt_pehe_in_mean",
        "sqrt_pehe_in_se",
        "sqrt_pehe_out_mean",
        "sqrt_pehe_out_se",
        "sqrt_pehe_out_median",
        "completed",
        "failed",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            opt(r.kl_target),
            r.offset.to_string(),
            r.kl.to_string(),
            r.method.name().to_string(),
            opt(r.sqrt_pehe_in.map(|s| s.mean)),
            opt(r.sqrt_pehe_in.map(|s| s.std_error)),
            opt(r.sqrt_pehe_out.map(|s| s.mean)),
            opt(r.sqrt_pehe_out.map(|s| s.std_error)),
            opt(r.sqrt_pehe_out_median),
            r.completed.to_string(),
            r.failed.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMiRow {
    pub record: EpochRecord,
    /// Validation √PEHE, when the data carry true effects.
    pub val_sqrt_pehe: Option<f64>,
}

/// Per-epoch training trace of the model without its adversarial
/// component, joined with validation √PEHE.
pub fn trace_mi(config: &ExperimentConfig, seed: u64) -> Result<Vec<TraceMiRow>, ExperimentError> {
    if config.variant != Variant::NoAdversarial {
        return Err(ExperimentError::Config(format!(
            "trace-mi runs the no_adversarial variant, config has {}",
            config.variant.name()
        )));
    }
    config.validate()?;
    let ds = load_dataset(&config.dataset, seed)?;
    let splits = split(&ds, &SplitSpec::new(seed))?;
    let mut mc = ablate(&config.model, AbceiVariant::NoAdversarial);
    mc.seed = seed;
    let mut model = AbceiModel::new(mc, ds.k())?;
    let val = &splits.val;
    let truth = val.tau_true();
    let mut rows = Vec::new();
    model.fit(&splits.train, val, |rec, m| {
        let val_sqrt_pehe = truth
            .as_ref()
            .and_then(|t| m.predict_cate(val.x()).ok().and_then(|tau| pehe(t, &tau).ok()));
        rows.push(TraceMiRow {
            record: *rec,
            val_sqrt_pehe,
        });
    })?;
    Ok(rows)
}

pub fn write_trace_mi_csv<W: Write>(
    config: &ExperimentConfig,
    seed: u64,
    rows: &[TraceMiRow],
    mut out: W,
) -> Result<(), ExperimentError> {
    out.write_all(csv_header_lines(config, &[seed])?.as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| ExperimentError::Output(e.to_string());
    let mut header: Vec<&str> = crate::model::TRACE_COLUMNS.to_vec();
    header.push("val_sqrt_pehe");
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let e = &r.record;
        w.write_record([
            e.epoch.to_string(),
            e.l_mi.to_string(),
            e.l_d.to_string(),
            e.l_phi.to_string(),
            e.l_pred.to_string(),
            e.val_mse.to_string(),
            e.mi_estimate.to_string(),
            opt(r.val_sqrt_pehe),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}
