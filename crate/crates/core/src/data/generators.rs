//! Synthetic benchmarks.
//!
//! * [`gen_toy_bias`]: two Gaussian groups sharing a covariance, with a
//!   tunable mean shift between them; both potential outcomes linear (or
//!   optionally nonlinear) in the covariates.
//! * [`gen_assignment_bernoulli`]: logistic treatment assignment applied to
//!   any covariate matrix; [`reassign_treatment`] uses it to bias a dataset
//!   that carries both potential outcomes.
//! * [`gen_linear_outcomes`]: linear outcomes with a constant effect and
//!   logistic assignment.
//!
//! Random streams are split so the covariance and outcome weights of a
//! toy spec depend on the seed only, never on the group means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::autodiff::Matrix;
use crate::linalg::{cholesky, cholesky_solve, symmetric_eigen, symmetric_eigenvalues};

const MAX_COVARIANCE_DRAWS: usize = 10;
const MAX_ASSIGNMENT_DRAWS: u64 = 10;
const EIGEN_FLOOR: f64 = 1e-6;
const TOY_NOISE_VAR: f64 = 0.1;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `C = ½(Σ + Σᵀ)` with `Σ ~ U(−1, 1)^{k×k}` until `C` is positive
/// definite. Such draws are rare beyond a few dimensions, so after the draw
/// budget the last draw is repaired by replacing its spectrum with
/// `max(|λ|, 1e-6)`: the covariance an SVD-based sampler would realise for
/// the indefinite matrix. A plain diagonal shift would leave an eigenvalue
/// near zero, along which a negligible mean shift reaches any KL target.
/// Returns `C` and whether it was repaired.
pub fn repaired_covariance<R: Rng>(k: usize, rng: &mut R) -> Result<(Matrix, bool), DataError> {
    let mut last = None;
    for _ in 0..MAX_COVARIANCE_DRAWS {
        let sigma = Matrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let c = Matrix::from_fn(k, k, |r, col| 0.5 * (sigma.get(r, col) + sigma.get(col, r)));
        if symmetric_eigenvalues(&c)?[0] > EIGEN_FLOOR && cholesky(&c).is_ok() {
            return Ok((c, false));
        }
        last = Some(c);
    }
    let c = last.expect("at least one draw");
    let (eig, v) = symmetric_eigen(&c)?;
    log::debug!(
        "covariance not positive definite after {MAX_COVARIANCE_DRAWS} draws (min eigenvalue {:.4}); using |C|",
        eig[0]
    );
    let lam: Vec<f64> = eig.iter().map(|l| l.abs().max(EIGEN_FLOOR)).collect();
    let full = Matrix::from_fn(k, k, |r, col| (0..k).map(|i| v.get(r, i) * lam[i] * v.get(col, i)).sum());
    // exact symmetry
    let sym = Matrix::from_fn(k, k, |r, col| 0.5 * (full.get(r, col) + full.get(col, r)));
    Ok((sym, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyOutcome {
    /// `μ_t(x) = w_tᵀx`.
    #[default]
    Linear,
    /// `μ_t(x) = w_tᵀx + 2·sin(w_tᵀx)`.
    Nonlinear,
}

/// Parameters of the selection-bias toy benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBiasSpec {
    pub n_control: usize,
    pub n_treated: usize,
    pub k: usize,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub outcome: ToyOutcome,
}

impl ToyBiasSpec {
    /// 800 control / 200 treated units, ten covariates, no mean shift.
    pub fn desk(seed: u64) -> Self {
        Self::with_counts(800, 200, seed)
    }

    /// 8000 control / 2000 treated units.
    pub fn full_scale(seed: u64) -> Self {
        Self::with_counts(8000, 2000, seed)
    }

    fn with_counts(n_control: usize, n_treated: usize, seed: u64) -> Self {
        Self {
            n_control,
            n_treated,
            k: 10,
            mu0: vec![0.0; 10],
            mu1: vec![0.0; 10],
            seed,
            outcome: ToyOutcome::Linear,
        }
    }

    /// Sets `μ₁ = μ₀ + offset·1`.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.mu1 = self.mu0.iter().map(|m| m + offset).collect();
        self
    }

    pub fn with_outcome(mut self, outcome: ToyOutcome) -> Self {
        self.outcome = outcome;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.k == 0 || self.n_control == 0 || self.n_treated == 0 {
            return Err(DataError::Invariant("toy spec needs k >= 1 and both groups nonempty".into()));
        }
        if self.mu0.len() != self.k || self.mu1.len() != self.k {
            return Err(DataError::Invariant(format!(
                "mean vectors must have length k = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Covariance and outcome weights; these depend on `seed` and `k` only.
    pub fn structure(&self) -> Result<ToyStructure, DataError> {
        self.validate()?;
        let mut rng = rng_stream(self.seed, 0);
        let (covariance, repaired) = repaired_covariance(self.k, &mut rng)?;
        let weights = Matrix::from_fn(self.k, 2, |_, _| rng.random_range(-1.0..1.0));
        let chol = cholesky(&covariance)?;
        Ok(ToyStructure {
            covariance,
            weights,
            repaired,
            chol,
        })
    }

    /// Closed-form KL divergence between the two covariate groups.
    pub fn kl(&self) -> Result<f64, DataError> {
        gaussian_kl(&self.mu0, &self.mu1, &self.structure()?.covariance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyStructure {
    pub covariance: Matrix,
    /// `k × 2`: column 0 drives the control outcome, column 1 the treated.
    pub weights: Matrix,
    /// The drawn matrix was indefinite and had its spectrum repaired.
    pub repaired: bool,
    chol: Matrix,
}

impl ToyStructure {
    /// Scalar offset `s` such that `μ₁ = μ₀ + s·1` gives the target KL.
    pub fn offset_for_kl(&self, target_kl: f64) -> Result<f64, DataError> {
        if !(target_kl >= 0.0) {
            return Err(DataError::Invariant(format!("KL target must be >= 0, got {target_kl}")));
        }
        let k = self.covariance.rows();
        let ones = Matrix::filled(k, 1, 1.0);
        let sol = cholesky_solve(&self.chol, &ones)?;
        let quad: f64 = sol.data().iter().sum();
        Ok((2.0 * target_kl / quad).sqrt())
    }

    fn mean_outcome(&self, outcome: ToyOutcome, x: &[f64], arm: usize) -> f64 {
        let lin: f64 = x.iter().enumerate().map(|(i, v)| v * self.weights.get(i, arm)).sum();
        match outcome {
            ToyOutcome::Linear => lin,
            ToyOutcome::Nonlinear => lin + 2.0 * lin.sin(),
        }
    }
}

/// Samples the toy benchmark: controls from `N(μ₀, C)`, treated from
/// `N(μ₁, C)`, outcome noise `N(0, 0.1)` per potential outcome.
pub fn gen_toy_bias(spec: &ToyBiasSpec) -> Result<Dataset, DataError> {
    let structure = spec.structure()?;
    let mut rng = rng_stream(spec.seed, 1);
    let n = spec.n_control + spec.n_treated;
    let k = spec.k;
    let noise = Normal::new(0.0, TOY_NOISE_VAR.sqrt()).expect("valid sd");

    let mut x = Vec::with_capacity(n * k);
    let mut t = Vec::with_capacity(n);
    let (mut yf, mut ycf, mut mu0, mut mu1) = (vec![], vec![], vec![], vec![]);
    for unit in 0..n {
        let treated = unit >= spec.n_control;
        let mean = if treated { &spec.mu1 } else { &spec.mu0 };
        let eps: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let row: Vec<f64> = (0..k)
            .map(|i| mean[i] + (0..=i).map(|j| structure.chol.get(i, j) * eps[j]).sum::<f64>())
            .collect();
        let m0 = structure.mean_outcome(spec.outcome, &row, 0);
        let m1 = structure.mean_outcome(spec.outcome, &row, 1);
        let y0 = m0 + noise.sample(&mut rng);
        let y1 = m1 + noise.sample(&mut rng);
        let (f, cf) = if treated { (y1, y0) } else { (y0, y1) };
        x.extend(row);
        t.push(treated as u8);
        yf.push(f);
        ycf.push(cf);
        mu0.push(m0);
        mu1.push(m1);
    }
    Dataset::new(Matrix::new(n, k, x)?, t, yf, Some(ycf), Some(mu0), Some(mu1))
}

/// Logistic assignment `t ~ Bernoulli(σ(wᵀx + n))` with
/// `w ~ N(0, w_var·I)` and per-unit `n ~ N(n_mean, n_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSpec {
    pub w_var: f64,
    pub n_mean: f64,
    pub n_sd: f64,
}

impl Default for AssignmentSpec {
    fn default() -> Self {
        Self {
            w_var: 0.1,
            n_mean: 1.0,
            n_sd: 0.1,
        }
    }
}

pub fn gen_assignment_bernoulli(x: &Matrix, spec: &AssignmentSpec, seed: u64) -> Result<Vec<u8>, DataError> {
    if !(spec.w_var >= 0.0) || !(spec.n_sd >= 0.0) {
        return Err(DataError::Invariant(format!("invalid assignment spec {spec:?}")));
    }
    let w_dist = Normal::new(0.0, spec.w_var.sqrt()).expect("valid sd");
    let n_dist = Normal::new(spec.n_mean, spec.n_sd).expect("valid sd");
    for attempt in 0..MAX_ASSIGNMENT_DRAWS {
        let mut rng = rng_stream(seed, attempt);
        let w: Vec<f64> = (0..x.cols()).map(|_| w_dist.sample(&mut rng)).collect();
        let t: Vec<u8> = (0..x.rows())
            .map(|r| {
                let logit = x.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + n_dist.sample(&mut rng);
                let p = 1.0 / (1.0 + (-logit).exp());
                (rng.random::<f64>() < p) as u8
            })
            .collect();
        if t.contains(&0) && t.contains(&1) {
            return Ok(t);
        }
        log::warn!("assignment draw {attempt} produced a single group; redrawing");
    }
    Err(DataError::Invariant(format!(
        "assignment produced a single treatment group in {MAX_ASSIGNMENT_DRAWS} draws"
    )))
}

/// Redraws treatment on a dataset that carries both potential outcomes,
/// swapping factual and counterfactual columns accordingly.
pub fn reassign_treatment(ds: &Dataset, spec: &AssignmentSpec, seed: u64) -> Result<Dataset, DataError> {
    let (y0, y1) = ds
        .potential_outcomes()
        .ok_or_else(|| DataError::Invariant("reassignment needs the ycf column".into()))?;
    let t = gen_assignment_bernoulli(ds.x(), spec, seed)?;
    let yf = (0..ds.n()).map(|i| if t[i] == 1 { y1[i] } else { y0[i] }).collect();
    let ycf = (0..ds.n()).map(|i| if t[i] == 1 { y0[i] } else { y1[i] }).collect();
    Dataset::new(
        ds.x().clone(),
        t,
        yf,
        Some(ycf),
        ds.mu0().map(<[f64]>::to_vec),
        ds.mu1().map(<[f64]>::to_vec),
    )
}

/// Linear outcomes with a constant treatment effect:
/// `y = wᵀx + β·t + n`, `w ~ N(0, C)`, `n ~ N(0, noise_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearOutcomeSpec {
    pub beta_effect: f64,
    pub noise_sd: f64,
    /// `s ~ N(0, w_var·I)`, `m ~ N(n_mean, n_sd²)`.
    pub assignment: AssignmentSpec,
}

impl Default for LinearOutcomeSpec {
    fn default() -> Self {
        Self {
            beta_effect: 2.0,
            noise_sd: 1.0,
            assignment: AssignmentSpec {
                w_var: 0.1,
                n_mean: 0.0,
                n_sd: 0.1,
            },
        }
    }
}

pub fn gen_linear_outcomes(x: &Matrix, spec: &LinearOutcomeSpec, seed: u64) -> Result<Dataset, DataError> {
    if !(spec.noise_sd >= 0.0) {
        return Err(DataError::Invariant("noise_sd must be >= 0".into()));
    }
    let k = x.cols();
    let mut rng = rng_stream(seed, 0);
    let (cov, _) = repaired_covariance(k, &mut rng)?;
    let chol = cholesky(&cov)?;
    let eps = Matrix::from_fn(k, 1, |_, _| StandardNormal.sample(&mut rng));
    let w = chol.matmul(&eps)?;
    let base = x.matmul(&w)?;

    let t = gen_assignment_bernoulli(x, &spec.assignment, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?;
    let noise = Normal::new(0.0, spec.noise_sd).expect("valid sd");
    let mut noise_rng = rng_stream(seed, 2);
    let n = x.rows();
    let mu0: Vec<f64> = base.data().to_vec();
    let mu1: Vec<f64> = mu0.iter().map(|m| m + spec.beta_effect).collect();
    let mut yf = Vec::with_capacity(n);
    let mut ycf = Vec::with_capacity(n);
    for i in 0..n {
        let y0 = mu0[i] + noise.sample(&mut noise_rng);
        let y1 = mu1[i] + noise.sample(&mut noise_rng);
        if t[i] == 1 {
            yf.push(y1);
            ycf.push(y0);
        } else {
            yf.push(y0);
            ycf.push(y1);
        }
    }
    Dataset::new(x.clone(), t, yf, Some(ycf), Some(mu0), Some(mu1))
}

/// `n × k` matrix of independent standard normal draws.
pub fn gaussian_covariates(n: usize, k: usize, seed: u64) -> Matrix {
    let mut rng = rng_stream(seed, 3);
    Matrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng))
}

/// `½(μ₁ − μ₀)ᵀ C⁻¹ (μ₁ − μ₀)`: KL divergence between two Gaussians that
/// share covariance `C`.
pub fn gaussian_kl(mu0: &[f64], mu1: &[f64], cov: &Matrix) -> Result<f64, DataError> {
    if mu0.len() != mu1.len() || cov.shape() != (mu0.len(), mu0.len()) {
        return Err(DataError::Invariant(format!(
            "KL inputs disagree: |mu0| = {}, |mu1| = {}, C is {:?}",
            mu0.len(),
            mu1.len(),
            cov.shape()
        )));
    }
    let delta = Matrix::column(&mu1.iter().zip(mu0).map(|(a, b)| a - b).collect::<Vec<_>>());
    let sol = cholesky_solve(&cholesky(cov)?, &delta)?;
    Ok(0.5 * delta.data().iter().zip(sol.data()).map(|(a, b)| a * b).sum::<f64>())
}
