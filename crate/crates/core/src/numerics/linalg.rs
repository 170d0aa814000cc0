//! Symmetric eigendecomposition (cyclic Jacobi) and the PSD matrix square
//! root built on it.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-8;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Unsorted eigenvalues.
    pub values: Array1<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Array2<f64>,
}

fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over all `(p, q)` pairs in row order until the off-diagonal
/// Frobenius norm drops below `1e-12 * max(1, ||A||_F)`. The input is
/// symmetrized as `(A + A^T) / 2` after the tolerance check.
pub fn sym_eigen(a: &Array2<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeError(format!(
            "expected a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }

    let mut m = (a + &a.t()) * 0.5;
    let mut v = Array2::<f64>::eye(n);
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = OFF_DIAGONAL_TOL * frob.max(1.0);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) < tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // M <- J^T M J, touching rows/columns p and q only.
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;

                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    Ok(SymmetricEigen {
        values: m.diag().to_owned(),
        vectors: v,
    })
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Negative eigenvalues (rounding noise on sample covariances) are clamped
/// to zero before taking roots.
pub fn sym_matrix_sqrt(a: &Array2<f64>) -> Result<Array2<f64>> {
    let eig = sym_eigen(a)?;
    let roots = eig.values.mapv(|l| l.max(0.0).sqrt());
    let scaled = &eig.vectors * &roots;
    let s = scaled.dot(&eig.vectors.t());
    Ok((&s + &s.t()) * 0.5)
}
