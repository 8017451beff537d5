//! Classical CATE baselines: single and two-model least squares, and
//! nearest-neighbour matching.

use serde::{Deserialize, Serialize};

use super::{CatePrediction, MetricError};
use crate::autodiff::Matrix;
use crate::data::{Dataset, Standardizer};
use crate::linalg::solve_spd_with_ridge;

const RIDGE: f64 = 1e-8;

/// Least squares via the normal equations, with a tiny ridge on failure.
/// The design gets an intercept column appended.
fn least_squares(x: &Matrix, y: &[f64]) -> Result<(Vec<f64>, bool), MetricError> {
    let n = x.rows();
    let p = x.cols() + 1;
    let design = Matrix::from_fn(n, p, |r, c| if c < x.cols() { x.get(r, c) } else { 1.0 });
    let xt = design.transpose();
    let gram = xt.matmul(&design).expect("conformable");
    let rhs = xt.matmul(&Matrix::column(y)).expect("conformable");
    let (coef, ridged) = solve_spd_with_ridge(&gram, &rhs, RIDGE)?;
    if ridged {
        log::warn!("normal equations singular; solved with ridge {RIDGE}");
    }
    Ok((coef.into_data(), ridged))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One linear model on `[x, t, 1]`; the CATE is the constant `t` coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsLr1 {
    pub beta: Vec<f64>,
    pub effect: f64,
    pub intercept: f64,
    pub ridged: bool,
}

impl OlsLr1 {
    pub fn fit(ds: &Dataset) -> Result<Self, MetricError> {
        let (n, k) = (ds.n(), ds.k());
        if n < k + 2 {
            return Err(MetricError::Underdetermined { n, params: k + 2 });
        }
        let xt = ds.x().concat_cols(&ds.t_column()).expect("row counts match");
        let (coef, ridged) = least_squares(&xt, ds.yf())?;
        Ok(Self {
            beta: coef[..k].to_vec(),
            effect: coef[k],
            intercept: coef[k + 1],
            ridged,
        })
    }

    pub fn predict(&self, x: &Matrix) -> CatePrediction {
        let y0: Vec<f64> = (0..x.rows()).map(|r| dot(&self.beta, x.row(r)) + self.intercept).collect();
        let y1 = y0.iter().map(|v| v + self.effect).collect();
        CatePrediction::from_outcomes(y0, y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub ridged: bool,
}

impl LinearFit {
    fn on_rows(ds: &Dataset, rows: &[usize]) -> Result<Self, MetricError> {
        if rows.is_empty() {
            return Err(MetricError::Balance("a treatment group is empty".into()));
        }
        let x = ds.x().select_rows(rows);
        let y: Vec<f64> = rows.iter().map(|&i| ds.yf()[i]).collect();
        let (coef, ridged) = least_squares(&x, &y)?;
        Ok(Self {
            beta: coef[..ds.k()].to_vec(),
            intercept: coef[ds.k()],
            ridged,
        })
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        dot(&self.beta, x) + self.intercept
    }
}

/// Separate linear models per treatment arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsLr2 {
    pub control: LinearFit,
    pub treated: LinearFit,
}

impl OlsLr2 {
    /// Arms with at most `k` units are solved with the fallback ridge.
    pub fn fit(ds: &Dataset) -> Result<Self, MetricError> {
        Ok(Self {
            control: LinearFit::on_rows(ds, &ds.control_indices())?,
            treated: LinearFit::on_rows(ds, &ds.treated_indices())?,
        })
    }

    pub fn predict(&self, x: &Matrix) -> CatePrediction {
        let y0 = (0..x.rows()).map(|r| self.control.predict_row(x.row(r))).collect();
        let y1 = (0..x.rows()).map(|r| self.treated.predict_row(x.row(r))).collect();
        CatePrediction::from_outcomes(y0, y1)
    }
}

pub fn ols_lr1(ds: &Dataset) -> Result<Vec<f64>, MetricError> {
    Ok(OlsLr1::fit(ds)?.predict(ds.x()).tau)
}

pub fn ols_lr2(ds: &Dataset) -> Result<Vec<f64>, MetricError> {
    Ok(OlsLr2::fit(ds)?.predict(ds.x()).tau)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean outcome of the `k` reference units nearest to `query`, ties broken
/// by lower index. `zx` holds the standardized reference covariates.
fn neighbour_mean(zx: &Matrix, y: &[f64], pool: &[usize], query: &[f64], k: usize) -> f64 {
    let mut d: Vec<(f64, usize)> = pool.iter().map(|&j| (sq_dist(zx.row(j), query), j)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d[..k].iter().map(|&(_, j)| y[j]).sum::<f64>() / k as f64
}

/// Within-set matching: each unit keeps its factual outcome and takes the
/// counterfactual as the mean outcome of its `k` nearest neighbours in the
/// opposite group of the same set. Distances are Euclidean on covariates
/// standardized with the set's own statistics.
pub fn knn_cate(ds: &Dataset, k: usize) -> Result<Vec<f64>, MetricError> {
    Ok(knn_predict_within(ds, k)?.tau)
}

pub fn knn_predict_within(ds: &Dataset, k: usize) -> Result<CatePrediction, MetricError> {
    let control = ds.control_indices();
    let treated = ds.treated_indices();
    check_k(k, &control, &treated)?;
    let zx = Standardizer::fit(ds.x()).apply(ds.x());
    let yf = ds.yf();
    let mut y0 = Vec::with_capacity(ds.n());
    let mut y1 = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let xi = zx.row(i);
        if ds.t()[i] == 1 {
            y0.push(neighbour_mean(&zx, yf, &control, xi, k));
            y1.push(yf[i]);
        } else {
            y0.push(yf[i]);
            y1.push(neighbour_mean(&zx, yf, &treated, xi, k));
        }
    }
    Ok(CatePrediction::from_outcomes(y0, y1))
}

/// Matching of new rows against a reference set: both potential outcomes
/// come from neighbours in the reference. Both sides are standardized with
/// the reference statistics.
pub fn knn_predict_against(reference: &Dataset, x: &Matrix, k: usize) -> Result<CatePrediction, MetricError> {
    let control = reference.control_indices();
    let treated = reference.treated_indices();
    check_k(k, &control, &treated)?;
    if x.cols() != reference.k() {
        return Err(MetricError::Length {
            expected: reference.k(),
            got: x.cols(),
        });
    }
    let std = Standardizer::fit(reference.x());
    let zx = std.apply(reference.x());
    let zq = std.apply(x);
    let yf = reference.yf();
    let y0 = (0..zq.rows()).map(|r| neighbour_mean(&zx, yf, &control, zq.row(r), k)).collect();
    let y1 = (0..zq.rows()).map(|r| neighbour_mean(&zx, yf, &treated, zq.row(r), k)).collect();
    Ok(CatePrediction::from_outcomes(y0, y1))
}

fn check_k(k: usize, control: &[usize], treated: &[usize]) -> Result<(), MetricError> {
    if k == 0 {
        return Err(MetricError::Domain("k must be at least 1".into()));
    }
    let smallest = control.len().min(treated.len());
    if k > smallest {
        return Err(MetricError::Domain(format!(
            "k = {k} exceeds the smaller treatment group ({smallest} units)"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_covariates, gen_linear_outcomes, LinearOutcomeSpec};
    use crate::eval::ate_error;
    use proptest::prelude::*;

    #[test]
    fn lr2_recovers_noiseless_linear_arms() {
        let x = gaussian_covariates(60, 3, 11);
        let b0 = [1.0, -2.0, 0.5];
        let b1 = [0.0, 3.0, 1.5];
        let t: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..60)
            .map(|i| {
                let row = x.row(i);
                if t[i] == 1 {
                    dot(&b1, row) - 1.0
                } else {
                    dot(&b0, row) + 2.0
                }
            })
            .collect();
        let ds = Dataset::new(x.clone(), t, y, None, None, None).unwrap();
        let fit = OlsLr2::fit(&ds).unwrap();
        for c in 0..3 {
            assert!((fit.control.beta[c] - b0[c]).abs() < 1e-8);
            assert!((fit.treated.beta[c] - b1[c]).abs() < 1e-8);
        }
        assert!((fit.control.intercept - 2.0).abs() < 1e-8);
        assert!((fit.treated.intercept + 1.0).abs() < 1e-8);
        let tau = ols_lr2(&ds).unwrap();
        for (i, v) in tau.iter().enumerate() {
            let expect = dot(&b1, x.row(i)) - 1.0 - dot(&b0, x.row(i)) - 2.0;
            assert!((v - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn lr1_recovers_constant_effect() {
        let x = gaussian_covariates(40, 2, 5);
        let t: Vec<u8> = (0..40).map(|i| (i % 3 == 0) as u8).collect();
        let y = (0..40).map(|i| 0.5 * x.get(i, 0) - x.get(i, 1) + 2.5 * f64::from(t[i]) + 1.0).collect();
        let ds = Dataset::new(x, t, y, None, None, None).unwrap();
        let tau = ols_lr1(&ds).unwrap();
        assert!(tau.iter().all(|v| (v - 2.5).abs() < 1e-8));
    }

    #[test]
    fn lr1_rejects_underdetermined() {
        let ds = Dataset::new(Matrix::zeros(3, 2), vec![0, 1, 0], vec![0.0; 3], None, None, None).unwrap();
        assert!(matches!(OlsLr1::fit(&ds), Err(MetricError::Underdetermined { .. })));
    }

    #[test]
    fn collinear_design_falls_back_to_ridge() {
        let x = Matrix::from_fn(12, 2, |r, _| r as f64);
        let t: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let y = (0..12).map(|i| i as f64).collect();
        let ds = Dataset::new(x, t, y, None, None, None).unwrap();
        let fit = OlsLr1::fit(&ds).unwrap();
        assert!(fit.ridged);
        assert!(fit.effect.is_finite());
    }

    #[test]
    fn knn_hand_case() {
        // controls at 0 and 10, treated at 1 and 9
        let x = Matrix::column(&[0.0, 10.0, 1.0, 9.0]);
        let ds = Dataset::new(x, vec![0, 0, 1, 1], vec![0.0, 5.0, 3.0, 7.0], None, None, None).unwrap();
        assert_eq!(knn_cate(&ds, 1).unwrap(), vec![3.0, 2.0, 3.0, 2.0]);
        assert_eq!(knn_cate(&ds, 2).unwrap(), vec![5.0, 0.0, 0.5, 4.5]);
        assert!(knn_cate(&ds, 3).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        // both controls are equidistant from the treated unit
        let x = Matrix::column(&[-1.0, 1.0, 0.0]);
        let ds = Dataset::new(x, vec![0, 0, 1], vec![10.0, 20.0, 0.0], None, None, None).unwrap();
        assert_eq!(knn_cate(&ds, 1).unwrap()[2], -10.0);
    }

    #[test]
    fn knn_distance_ignores_column_scale() {
        // in raw units the treated unit is nearest to control 1 (x1 gap 10
        // vs 20 is swamped by x0); standardized, control 0 is nearer
        let x = Matrix::from_fn(4, 2, |r, c| [[0.0, 0.0], [300.0, 2.0], [0.0, 4.0], [100.0, 1.0]][r][c]);
        let ds = Dataset::new(x.clone(), vec![0, 0, 0, 1], vec![1.0, 2.0, 3.0, 10.0], None, None, None).unwrap();
        let base = knn_cate(&ds, 1).unwrap();
        let scaled = Matrix::from_fn(4, 2, |r, c| x.get(r, c) * if c == 0 { 1e-3 } else { 1e3 });
        let ds2 = ds.with_x(scaled).unwrap();
        assert_eq!(knn_cate(&ds2, 1).unwrap(), base);
        let q = Matrix::from_fn(1, 2, |_, c| [100.0, 1.0][c]);
        let against = knn_predict_against(&ds, &q, 1).unwrap();
        assert_eq!(against.tau[0], base[3]);
    }

    #[test]
    fn lr2_beats_lr1_on_ate_with_heterogeneous_effects() {
        // effect varies with x0 and the treated group is shifted in x0,
        // so a single constant-effect model is biased
        let mut wins = 0;
        for seed in 0..20 {
            let n = 400;
            let mut x = gaussian_covariates(n, 3, seed);
            let t: Vec<u8> = (0..n).map(|i| (x.get(i, 0) > 0.0) as u8).collect();
            for i in 0..n {
                if t[i] == 1 {
                    x.set(i, 0, x.get(i, 0) + 1.0);
                }
            }
            let mu0: Vec<f64> = (0..n).map(|i| x.get(i, 1) + 0.5 * x.get(i, 0)).collect();
            let mu1: Vec<f64> = (0..n).map(|i| mu0[i] + 1.0 + 2.0 * x.get(i, 0)).collect();
            let yf = (0..n).map(|i| if t[i] == 1 { mu1[i] } else { mu0[i] }).collect();
            let ds = Dataset::new(x, t, yf, None, Some(mu0), Some(mu1)).unwrap();
            let truth = ds.tau_true().unwrap();
            let e1 = ate_error(&truth, &ols_lr1(&ds).unwrap()).unwrap();
            let e2 = ate_error(&truth, &ols_lr2(&ds).unwrap()).unwrap();
            if e2 < e1 {
                wins += 1;
            }
        }
        assert!(wins >= 18, "lr2 won {wins}/20");
    }

    #[test]
    fn baselines_on_generated_linear_outcomes() {
        let x = gaussian_covariates(300, 4, 3);
        let ds = gen_linear_outcomes(&x, &LinearOutcomeSpec::default(), 3).unwrap();
        let truth = ds.tau_true().unwrap();
        let est = ols_lr2(&ds).unwrap();
        assert!(ate_error(&truth, &est).unwrap() < 0.5);
    }

    proptest! {
        #[test]
        fn baselines_are_row_permutation_equivariant(seed in 0u64..200, rot in 1usize..29) {
            let n = 30;
            let x = gaussian_covariates(n, 2, seed);
            let t: Vec<u8> = (0..n).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8).collect();
            let y: Vec<f64> = (0..n).map(|i| x.get(i, 0) * 2.0 + f64::from(t[i]) + (i as f64 * 0.37).sin()).collect();
            let ds = Dataset::new(x, t, y, None, None, None).unwrap();
            let perm: Vec<usize> = (0..n).map(|i| (i * 7 + rot) % n).collect();
            let pds = ds.select(&perm);
            for f in [ols_lr1 as fn(&Dataset) -> Result<Vec<f64>, MetricError>, ols_lr2] {
                let a = f(&ds).unwrap();
                let b = f(&pds).unwrap();
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert!((a[i] - b[j]).abs() < 1e-8);
                }
            }
            // continuous covariates: no distance ties, so matching is exactly equivariant
            let a = knn_cate(&ds, 2).unwrap();
            let b = knn_cate(&pds, 2).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((a[i] - b[j]).abs() < 1e-12);
            }
        }
    }
}
