use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::autodiff::Matrix;

const MAX_SPLIT_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 60/30/10 partition.
    pub fn new(seed: u64) -> Self {
        Self {
            train: 0.6,
            val: 0.3,
            test: 0.1,
            seed,
        }
    }

    fn sizes(&self, n: usize) -> Result<(usize, usize, usize), DataError> {
        let fractions = [self.train, self.val, self.test];
        if fractions.iter().any(|f| !(*f > 0.0)) || ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(DataError::Split(format!(
                "fractions must be positive and sum to 1, got {fractions:?}"
            )));
        }
        if n < 10 {
            return Err(DataError::Split(format!("need at least 10 units, got {n}")));
        }
        let n_train = (self.train * n as f64).round() as usize;
        let n_val = (self.val * n as f64).round() as usize;
        let n_test = n.saturating_sub(n_train + n_val);
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(DataError::Split(format!("split of {n} units leaves an empty part")));
        }
        Ok((n_train, n_val, n_test))
    }
}

/// Per-column affine standardization fitted on one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation per column; constant
    /// columns get scale 1.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.sum_rows().data().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) / self.scale[c])
    }

    pub fn apply_dataset(&self, ds: &Dataset) -> Dataset {
        ds.with_x(self.apply(ds.x())).expect("row count preserved")
    }
}

/// Train/validation/test partition with covariates standardized using
/// training statistics.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub standardizer: Standardizer,
    /// Seed that produced the partition (the requested one, or a later
    /// seed if the training part lacked a treatment group).
    pub seed_used: u64,
}

impl Splits {
    /// Training and validation parts together (in-sample evaluation set).
    pub fn in_sample(&self) -> Dataset {
        self.train.concat(&self.val).expect("splits share columns")
    }
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    let (n_train, n_val, _) = spec.sizes(ds.n())?;
    for attempt in 0..MAX_SPLIT_ATTEMPTS {
        let seed = spec.seed.wrapping_add(attempt);
        let mut idx: Vec<usize> = (0..ds.n()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train_idx = idx[..n_train].to_vec();
        let groups = train_idx.iter().map(|&i| ds.t()[i]).fold([0usize; 2], |mut acc, t| {
            acc[t as usize] += 1;
            acc
        });
        if groups[0] == 0 || groups[1] == 0 {
            log::warn!("split seed {seed} left a treatment group empty in train; retrying");
            continue;
        }
        let val_idx = idx[n_train..n_train + n_val].to_vec();
        let test_idx = idx[n_train + n_val..].to_vec();
        let train_raw = ds.select(&train_idx);
        let standardizer = Standardizer::fit(train_raw.x());
        return Ok(Splits {
            train: standardizer.apply_dataset(&train_raw),
            val: standardizer.apply_dataset(&ds.select(&val_idx)),
            test: standardizer.apply_dataset(&ds.select(&test_idx)),
            train_idx,
            val_idx,
            test_idx,
            standardizer,
            seed_used: seed,
        });
    }
    Err(DataError::Split(format!(
        "no seed in {}..{} gave both treatment groups in train",
        spec.seed,
        spec.seed.wrapping_add(MAX_SPLIT_ATTEMPTS)
    )))
}
