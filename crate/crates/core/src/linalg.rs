//! Small dense solvers over [`Matrix`]: Cholesky factorization, symmetric
//! positive-definite solves and a cyclic Jacobi eigenvalue routine.

use thiserror::Error;

use crate::autodiff::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("expected a square matrix, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("right-hand side has {got} rows, expected {expected}")]
    RhsLength { expected: usize, got: usize },
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = square(a)?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` for every column of `b`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = square(l)?;
    if b.rows() != n {
        return Err(LinalgError::RhsLength {
            expected: n,
            got: b.rows(),
        });
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(x)
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    cholesky_solve(&cholesky(a)?, b)
}

/// Like [`solve_spd`], retrying once with `ridge · I` added when the
/// factorization fails. Returns the solution and whether the ridge was used.
pub fn solve_spd_with_ridge(a: &Matrix, b: &Matrix, ridge: f64) -> Result<(Matrix, bool), LinalgError> {
    match solve_spd(a, b) {
        Ok(x) => Ok((x, false)),
        Err(LinalgError::NotPositiveDefinite { .. }) => {
            let n = a.rows();
            let mut shifted = a.clone();
            for i in 0..n {
                shifted.set(i, i, shifted.get(i, i) + ridge);
            }
            Ok((solve_spd(&shifted, b)?, true))
        }
        Err(e) => Err(e),
    }
}

/// Eigenvalues of a symmetric matrix (ascending), by cyclic Jacobi sweeps.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>, LinalgError> {
    Ok(symmetric_eigen(a)?.0)
}

/// Eigen-decomposition `A = V·diag(λ)·Vᵀ` of a symmetric matrix by cyclic
/// Jacobi sweeps. Eigenvalues ascend; column `i` of `V` belongs to `λ_i`.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    let n = square(a)?;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        let scale: f64 = (0..n).map(|i| m.get(i, i).powi(2)).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let eig = order.iter().map(|&i| m.get(i, i)).collect();
    let vecs = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((eig, vecs))
}

fn square(a: &Matrix) -> Result<usize, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare(a.rows(), a.cols()));
    }
    Ok(a.rows())
}
