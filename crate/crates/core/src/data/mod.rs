//! Observational datasets: schema, CSV I/O, splitting and the synthetic
//! generators.

mod csv_io;
mod generators;
mod split;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix};
use crate::linalg::LinalgError;

pub use csv_io::{load_csv, read_csv, write_csv};
pub use generators::{
    gaussian_covariates, gaussian_kl, gen_assignment_bernoulli, gen_linear_outcomes, gen_toy_bias,
    reassign_treatment, repaired_covariance, AssignmentSpec, LinearOutcomeSpec, ToyBiasSpec, ToyOutcome,
    ToyStructure,
};
pub use split::{split, SplitSpec, Splits, Standardizer};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invariant(String),
    #[error("split failed: {0}")]
    Split(String),
    #[error("numeric error: {0}")]
    Numeric(#[from] LinalgError),
    #[error(transparent)]
    Matrix(#[from] AutodiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Observational table: covariates, binary treatment, factual outcome and
/// optional counterfactual outcome / noiseless potential-outcome means.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    t: Vec<u8>,
    yf: Vec<f64>,
    ycf: Option<Vec<f64>>,
    mu0: Option<Vec<f64>>,
    mu1: Option<Vec<f64>>,
}

impl Dataset {
    /// Validates the full invariant set, including that both treatment
    /// groups are present.
    pub fn new(
        x: Matrix,
        t: Vec<u8>,
        yf: Vec<f64>,
        ycf: Option<Vec<f64>>,
        mu0: Option<Vec<f64>>,
        mu1: Option<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            x,
            t,
            yf,
            ycf,
            mu0,
            mu1,
        };
        ds.check_columns()?;
        if ds.treated_indices().is_empty() || ds.control_indices().is_empty() {
            return Err(DataError::Invariant(
                "both treatment groups must be nonempty".into(),
            ));
        }
        Ok(ds)
    }

    fn check_columns(&self) -> Result<(), DataError> {
        let n = self.x.rows();
        let len_ok = |name: &str, v: &[f64]| -> Result<(), DataError> {
            if v.len() != n {
                return Err(DataError::Invariant(format!(
                    "column {name} has {} values for {n} rows",
                    v.len()
                )));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(DataError::Invariant(format!("column {name} row {i} is not finite")));
            }
            Ok(())
        };
        if self.t.len() != n {
            return Err(DataError::Invariant(format!(
                "column t has {} values for {n} rows",
                self.t.len()
            )));
        }
        if let Some(i) = self.t.iter().position(|&t| t > 1) {
            return Err(DataError::Invariant(format!("t[{i}] is not 0 or 1")));
        }
        len_ok("yf", &self.yf)?;
        for (name, col) in [("ycf", &self.ycf), ("mu0", &self.mu0), ("mu1", &self.mu1)] {
            if let Some(c) = col {
                len_ok(name, c)?;
            }
        }
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(DataError::Invariant("mu0 and mu1 must be supplied together".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn k(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn t(&self) -> &[u8] {
        &self.t
    }

    pub fn yf(&self) -> &[f64] {
        &self.yf
    }

    pub fn ycf(&self) -> Option<&[f64]> {
        self.ycf.as_deref()
    }

    pub fn mu0(&self) -> Option<&[f64]> {
        self.mu0.as_deref()
    }

    pub fn mu1(&self) -> Option<&[f64]> {
        self.mu1.as_deref()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.t[i] == 1).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.t[i] == 0).collect()
    }

    /// `t` as an `n × 1` column of 0.0/1.0.
    pub fn t_column(&self) -> Matrix {
        Matrix::from_fn(self.n(), 1, |r, _| f64::from(self.t[r]))
    }

    /// True per-unit CATE `mu1 − mu0`, when the means are known.
    pub fn tau_true(&self) -> Option<Vec<f64>> {
        let (m0, m1) = (self.mu0.as_ref()?, self.mu1.as_ref()?);
        Some(m1.iter().zip(m0).map(|(a, b)| a - b).collect())
    }

    /// Observed potential outcomes `(y0, y1)` reconstructed from the factual
    /// and counterfactual columns.
    pub fn potential_outcomes(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let ycf = self.ycf.as_ref()?;
        let mut y0 = Vec::with_capacity(self.n());
        let mut y1 = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            if self.t[i] == 1 {
                y1.push(self.yf[i]);
                y0.push(ycf[i]);
            } else {
                y0.push(self.yf[i]);
                y1.push(ycf[i]);
            }
        }
        Some((y0, y1))
    }

    /// Rows by index. The result may contain a single treatment group.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            yf: pick(&self.yf),
            ycf: self.ycf.as_deref().map(pick),
            mu0: self.mu0.as_deref().map(pick),
            mu1: self.mu1.as_deref().map(pick),
        }
    }

    /// Same rows with replaced covariates.
    pub fn with_x(&self, x: Matrix) -> Result<Dataset, DataError> {
        if x.rows() != self.n() {
            return Err(DataError::Invariant(format!(
                "replacement covariates have {} rows, expected {}",
                x.rows(),
                self.n()
            )));
        }
        Ok(Dataset { x, ..self.clone() })
    }

    /// Concatenates two datasets with matching columns.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.k() != other.k()
            || self.ycf.is_some() != other.ycf.is_some()
            || self.mu0.is_some() != other.mu0.is_some()
        {
            return Err(DataError::Invariant("datasets have different columns".into()));
        }
        let join = |a: &Option<Vec<f64>>, b: &Option<Vec<f64>>| {
            a.as_ref().zip(b.as_ref()).map(|(a, b)| [a.as_slice(), b].concat())
        };
        let mut xdata = self.x.data().to_vec();
        xdata.extend_from_slice(other.x.data());
        Ok(Dataset {
            x: Matrix::new(self.n() + other.n(), self.k(), xdata)?,
            t: [self.t.as_slice(), &other.t].concat(),
            yf: [self.yf.as_slice(), &other.yf].concat(),
            ycf: join(&self.ycf, &other.ycf),
            mu0: join(&self.mu0, &other.mu0),
            mu1: join(&self.mu1, &other.mu1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            Matrix::from_fn(4, 2, |r, c| (r * 2 + c) as f64),
            vec![0, 1, 0, 1],
            vec![1.0, 2.0, 3.0, 4.0],
            Some(vec![1.5, 2.5, 3.5, 4.5]),
            Some(vec![1.0, 2.0, 3.0, 4.0]),
            Some(vec![2.0, 2.0, 5.0, 4.0]),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_treatment_and_single_group() {
        let x = Matrix::zeros(3, 1);
        assert!(Dataset::new(x.clone(), vec![0, 2, 1], vec![0.0; 3], None, None, None).is_err());
        assert!(Dataset::new(x.clone(), vec![1, 1, 1], vec![0.0; 3], None, None, None).is_err());
        assert!(Dataset::new(x.clone(), vec![0, 1], vec![0.0; 3], None, None, None).is_err());
        assert!(Dataset::new(x, vec![0, 1, 1], vec![0.0; 3], None, Some(vec![0.0; 3]), None).is_err());
    }

    #[test]
    fn potential_outcomes_follow_consistency() {
        let ds = tiny();
        let (y0, y1) = ds.potential_outcomes().unwrap();
        for i in 0..ds.n() {
            let factual = if ds.t()[i] == 1 { y1[i] } else { y0[i] };
            assert_eq!(factual, ds.yf()[i]);
        }
        assert_eq!(ds.tau_true().unwrap(), vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn select_and_concat() {
        let ds = tiny();
        let a = ds.select(&[0, 1]);
        let b = ds.select(&[2, 3]);
        assert_eq!(a.concat(&b).unwrap(), ds);
        assert_eq!(ds.select(&[1, 3]).control_indices().len(), 0);
    }
}
