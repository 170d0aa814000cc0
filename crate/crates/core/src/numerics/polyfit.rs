use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares polynomial, coefficients in ascending powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub rms_residual: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Root-mean-square residual of this polynomial on `(xs, ys)`.
    pub fn rms_on(&self, xs: &[f64], ys: &[f64]) -> f64 {
        rms(&self.coefficients, xs, ys)
    }
}

pub(crate) fn rms(coefficients: &[f64], xs: &[f64], ys: &[f64]) -> f64 {
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let fx = coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c);
            (y - fx) * (y - fx)
        })
        .sum();
    (ssr / xs.len() as f64).sqrt()
}

/// Fits a polynomial of `degree` by Householder QR on the Vandermonde matrix.
///
/// A column whose reflected diagonal is below `1e-10` times the largest
/// column norm marks the design as rank deficient.
pub fn polyfit_least_squares(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeError(format!(
            "{} abscissae but {} ordinates",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    let cols = degree + 1;
    if degree == 0 || n < cols {
        return Err(Error::DegenerateFit);
    }

    // Column-major Vandermonde plus right-hand side.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| xs.iter().map(|x| x.powi(j as i32)).collect())
        .collect();
    let mut b = ys.to_vec();
    let col_scale = a
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);

    for k in 0..cols {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-10 * col_scale {
            return Err(Error::DegenerateFit);
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let reflect = |col: &mut [f64]| {
            let dot: f64 = v.iter().zip(col.iter()).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col.iter_mut().zip(&v) {
                *c -= f * vi;
            }
        };
        for col in a.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut b[k..]);
    }

    // Back substitution on the leading upper-triangular block.
    let mut coefficients = vec![0.0; cols];
    for i in (0..cols).rev() {
        let mut s = b[i];
        for j in (i + 1)..cols {
            s -= a[j][i] * coefficients[j];
        }
        if a[i][i].abs() <= 1e-10 * col_scale {
            return Err(Error::DegenerateFit);
        }
        coefficients[i] = s / a[i][i];
    }

    let rms_residual = rms(&coefficients, xs, ys);
    Ok(PolyFit {
        degree,
        coefficients,
        rms_residual,
    })
}
