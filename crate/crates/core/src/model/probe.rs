//! Linear-probe balance diagnostic: how well treatment can be predicted
//! from a representation.

use super::ModelError;
use crate::autodiff::Matrix;
use crate::data::Standardizer;
use crate::linalg::solve_spd_with_ridge;

const FOLDS: usize = 5;
const L2: f64 = 1e-3;
const MAX_NEWTON: usize = 50;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Ridge-penalized logistic regression by Newton's method. Returns weights
/// with the intercept last.
fn fit_logistic(x: &Matrix, y: &[f64]) -> Result<Vec<f64>, ModelError> {
    let (n, p) = (x.rows(), x.cols() + 1);
    let design = Matrix::from_fn(n, p, |r, c| if c < x.cols() { x.get(r, c) } else { 1.0 });
    let mut w = vec![0.0; p];
    for _ in 0..MAX_NEWTON {
        let mut grad = vec![0.0; p];
        let mut weighted = design.clone();
        for r in 0..n {
            let row = design.row(r);
            let pr = sigmoid(row.iter().zip(&w).map(|(a, b)| a * b).sum());
            for c in 0..p {
                grad[c] += (pr - y[r]) * row[c] / n as f64;
            }
            let s = (pr * (1.0 - pr)).max(1e-12) / n as f64;
            for c in 0..p {
                weighted.set(r, c, row[c] * s);
            }
        }
        for c in 0..p {
            grad[c] += L2 * w[c];
        }
        let mut hess = design.transpose().matmul(&weighted)?;
        for c in 0..p {
            hess.set(c, c, hess.get(c, c) + L2);
        }
        let (delta, _) = solve_spd_with_ridge(&hess, &Matrix::column(&grad), 1e-8)
            .map_err(|e| ModelError::Data(format!("probe solver: {e}")))?;
        let mut step = 0.0;
        for c in 0..p {
            w[c] -= delta.data()[c];
            step += delta.data()[c].powi(2);
        }
        if step.sqrt() < 1e-10 {
            break;
        }
    }
    Ok(w)
}

/// Five-fold cross-validated accuracy of a logistic classifier predicting
/// `t` from the rows of `h`. Folds are stratified by group and assigned
/// deterministically; features are standardized on each training fold.
pub fn balance_probe(h: &Matrix, t: &[u8]) -> Result<f64, ModelError> {
    if h.rows() != t.len() {
        return Err(ModelError::Data(format!("{} rows for {} labels", h.rows(), t.len())));
    }
    let n1 = t.iter().filter(|&&v| v == 1).count();
    let n0 = t.iter().filter(|&&v| v == 0).count();
    if n0 + n1 != t.len() {
        return Err(ModelError::Data("treatment must be 0 or 1".into()));
    }
    if n0 < 2 || n1 < 2 {
        return Err(ModelError::Balance(format!("probe needs 2 units per group, got {n0}/{n1}")));
    }
    let mut fold = vec![0usize; t.len()];
    let mut seen = [0usize; 2];
    for (i, &g) in t.iter().enumerate() {
        fold[i] = seen[g as usize] % FOLDS;
        seen[g as usize] += 1;
    }
    let mut correct = 0usize;
    for f in 0..FOLDS {
        let test: Vec<usize> = (0..t.len()).filter(|&i| fold[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let train: Vec<usize> = (0..t.len()).filter(|&i| fold[i] != f).collect();
        let xtr = h.select_rows(&train);
        let ytr: Vec<f64> = train.iter().map(|&i| f64::from(t[i])).collect();
        let std = Standardizer::fit(&xtr);
        let w = fit_logistic(&std.apply(&xtr), &ytr)?;
        let xte = std.apply(&h.select_rows(&test));
        for (r, &i) in test.iter().enumerate() {
            let score: f64 = xte.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1];
            if (score > 0.0) == (t[i] == 1) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / t.len() as f64)
}
