//! Small dense linear-algebra helpers shared across modules.
//!
//! Dimensions here are tiny (d <= 16), so everything leans on nalgebra's
//! dense routines; the only subtlety is the eigenvalue floor in the
//! symmetric square roots, which guards matrix roots of SPD inputs against
//! finite-precision negative eigenvalues.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Eigenvalue floor applied inside symmetric matrix roots.
pub const EIG_FLOOR: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| c * x).collect()
}

/// `a + c * b`, in place on `a`.
pub fn axpy(a: &mut [f64], c: f64, b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += c * y;
    }
}

/// Affine combination `(1-t) x + t y`.
pub fn lerp(x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Numerically stable `log(sum_i exp(x_i))`; `-inf` on empty input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax computed in log space. Entries below `1e-300` are dropped to zero.
pub fn softmax_from_log(log_w: &[f64]) -> Vec<f64> {
    let lse = logsumexp(log_w);
    log_w
        .iter()
        .map(|&lw| {
            let w = (lw - lse).exp();
            if w < 1e-300 {
                0.0
            } else {
                w
            }
        })
        .collect()
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = if nr == 0 { 0 } else { rows[0].len() };
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

pub fn vec_to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Symmetric eigendecomposition based matrix power with eigenvalue floor.
fn sym_pow(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(EIG_FLOOR);
        let v = eig.eigenvectors.column(k);
        out += lam.powf(p) * &v * v.transpose();
    }
    out
}

/// Principal square root of an SPD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_pow(m, 0.5)
}

/// Inverse principal square root of an SPD matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_pow(m, -0.5)
}

/// Solve `M x = b` by LU, erroring on singular `M`.
pub fn solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidArgument("singular linear system".into()))
}

pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("singular matrix".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_in_safe_range() {
        let xs = [0.3f64, -1.2, 2.5];
        let naive = xs.iter().map(|x| f64::exp(*x)).sum::<f64>().ln();
        assert!((logsumexp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_handles_large_offsets() {
        let xs = [-1000.0, -1000.5];
        let v = logsumexp(&xs);
        assert!((v - (-1000.0 + (1.0f64 + (-0.5f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let m = mat_from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let r = sym_sqrt(&m);
        let back = &r * &r;
        assert!((&back - &m).abs().max() < 1e-12);
    }

    #[test]
    fn sym_inv_sqrt_is_inverse_of_sqrt() {
        let m = mat_from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]);
        let a = sym_sqrt(&m) * sym_inv_sqrt(&m);
        assert!((&a - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
    }
}
