//! Small dense helpers shared by the model and fitting code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are treated as
/// numerically singular even if the factorization technically succeeds.
const PD_REL_EPS: f64 = 1e-13;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower Cholesky factor, or an error naming `what` when the matrix is not
/// (numerically) positive definite.
pub fn cholesky_lower(mat: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = mat.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DegenerateParameter(format!("{what} is not positive definite")));
    }
    let chol = mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateParameter(format!("{what} is not positive definite")))?;
    let l = chol.unpack();
    for i in 0..l.nrows() {
        let piv = l[(i, i)];
        if !(piv * piv > PD_REL_EPS * scale) {
            return Err(Error::DegenerateParameter(format!("{what} is numerically singular")));
        }
    }
    Ok(l)
}

pub fn is_positive_definite(mat: &DMatrix<f64>) -> bool {
    cholesky_lower(mat, "matrix").is_ok()
}

pub fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Inverse of an SPD matrix given its lower Cholesky factor.
pub fn spd_inverse_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut linv = DMatrix::<f64>::identity(n, n);
    l.solve_lower_triangular_mut(&mut linv);
    let mut inv = linv.transpose() * &linv;
    symmetrize(&mut inv);
    inv
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Solves `L z = v` in place, `l` row-major lower triangular `p x p`.
#[inline]
pub fn forward_solve_in_place(l: &[f64], p: usize, v: &mut [f64]) {
    for i in 0..p {
        let row = &l[i * p..i * p + i];
        let mut s = v[i];
        for (a, b) in row.iter().zip(v[..i].iter()) {
            s -= a * b;
        }
        v[i] = s / l[i * p + i];
    }
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Random orthonormal `q x q` matrix from the QR factorization of a
/// Gaussian matrix (sign-corrected so the distribution is Haar).
pub fn random_orthonormal<R: rand::Rng + ?Sized>(q: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let g = DMatrix::<f64>::from_fn(q, q, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut qm = qr.q();
    let r = qr.r();
    for j in 0..q {
        if r[(j, j)] < 0.0 {
            qm.column_mut(j).neg_mut();
        }
    }
    qm
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(!is_positive_definite(&m));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(is_positive_definite(&m));
    }

    #[test]
    fn inverse_matches() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky_lower(&m, "m").unwrap();
        let inv = spd_inverse_from_cholesky(&l);
        let id = &m * &inv;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - e).abs() < 1e-12);
            }
        }
        let det: f64 = m.determinant();
        assert!((log_det_from_cholesky(&l) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_solve() {
        let l = [2.0, 0.0, 1.0, 3.0];
        let mut v = [4.0, 5.0];
        forward_solve_in_place(&l, 2, &mut v);
        assert!((v[0] - 2.0).abs() < 1e-15);
        assert!((v[1] - 1.0).abs() < 1e-15);
    }
}
