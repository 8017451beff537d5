use super::MetricError;
use crate::data::Dataset;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Length {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricError::Domain("empty input".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Square root of the mean squared CATE error.
pub fn pehe(tau_true: &[f64], tau_hat: &[f64]) -> Result<f64, MetricError> {
    check_lengths(tau_true, tau_hat)?;
    let mse = tau_true
        .iter()
        .zip(tau_hat)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / tau_true.len() as f64;
    Ok(mse.sqrt())
}

/// `|mean(tau_true) − mean(tau_hat)|`.
pub fn ate_error(tau_true: &[f64], tau_hat: &[f64]) -> Result<f64, MetricError> {
    check_lengths(tau_true, tau_hat)?;
    Ok((mean(tau_true) - mean(tau_hat)).abs())
}

/// True ATT from the potential-outcome means (or, failing that, from the
/// observed counterfactual column) over treated units.
pub fn att_from_dataset(ds: &Dataset) -> Result<f64, MetricError> {
    let treated = ds.treated_indices();
    if treated.is_empty() {
        return Err(MetricError::Balance("no treated units".into()));
    }
    let tau: Vec<f64> = if let Some(tau) = ds.tau_true() {
        tau
    } else if let Some((y0, y1)) = ds.potential_outcomes() {
        y1.iter().zip(&y0).map(|(a, b)| a - b).collect()
    } else {
        return Err(MetricError::Unavailable("ATT needs mu0/mu1 or ycf".into()));
    };
    Ok(treated.iter().map(|&i| tau[i]).sum::<f64>() / treated.len() as f64)
}

/// `|att_true − mean(tau_hat over treated)|`. When `att_true` is `None` it
/// is derived with [`att_from_dataset`].
pub fn att_error(ds: &Dataset, tau_hat: &[f64], att_true: Option<f64>) -> Result<f64, MetricError> {
    if tau_hat.len() != ds.n() {
        return Err(MetricError::Length {
            expected: ds.n(),
            got: tau_hat.len(),
        });
    }
    let treated = ds.treated_indices();
    if treated.is_empty() {
        return Err(MetricError::Balance("no treated units".into()));
    }
    let att_true = match att_true {
        Some(v) => v,
        None => att_from_dataset(ds)?,
    };
    let est = treated.iter().map(|&i| tau_hat[i]).sum::<f64>() / treated.len() as f64;
    Ok((att_true - est).abs())
}

/// Policy risk of treating exactly the units with `tau_hat > 0`:
/// `1 − [E(y1 | π=1)·P(π=1) + E(y0 | π=0)·P(π=0)]`. An empty
/// recommendation cell contributes 0. `mask` restricts the evaluation to a
/// subset of rows (e.g. a randomized component).
pub fn policy_risk(ds: &Dataset, tau_hat: &[f64], mask: Option<&[bool]>) -> Result<f64, MetricError> {
    if tau_hat.len() != ds.n() {
        return Err(MetricError::Length {
            expected: ds.n(),
            got: tau_hat.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != ds.n() {
            return Err(MetricError::Length {
                expected: ds.n(),
                got: m.len(),
            });
        }
    }
    let (y0, y1) = ds
        .potential_outcomes()
        .ok_or_else(|| MetricError::Unavailable("policy risk needs the ycf column".into()))?;
    if y0.iter().chain(&y1).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(MetricError::Domain("policy risk needs outcomes in [0, 1]".into()));
    }
    let rows: Vec<usize> = (0..ds.n()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    if rows.is_empty() {
        return Err(MetricError::Domain("mask selects no rows".into()));
    }
    // Σ_{π=1} y1 + Σ_{π=0} y0 over n equals the cell form
    // E[y1|π=1]·P(π=1) + E[y0|π=0]·P(π=0), with empty cells contributing 0.
    let value: f64 = rows.iter().map(|&i| if tau_hat[i] > 0.0 { y1[i] } else { y0[i] }).sum();
    Ok(1.0 - value / rows.len() as f64)
}

/// Area under the ROC curve in Mann–Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::Domain("scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(MetricError::Domain("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Unavailable("AUC needs both label classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie blocks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
