//! Small dense helpers shared by the bound and estimator code.
//!
//! Information matrices mix entries that differ by many orders of magnitude
//! (the clock slope terms grow with the epoch index), so every
//! invertibility decision is taken on the Jacobi-equilibrated matrix
//! `D A D` with `D = diag(A)^{-1/2}`.

use nalgebra::{DMatrix, DVector};

/// A symmetric block is treated as invertible iff its reciprocal condition
/// number (after equilibration) exceeds this value.
pub const RCOND_GATE: f64 = 1e-12;

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

fn equilibration(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        a.nrows(),
        (0..a.nrows()).map(|i| {
            let d = a[(i, i)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        }),
    )
}

fn scaled(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut s = a.clone();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            s[(i, j)] *= d[i] * d[j];
        }
    }
    symmetrize(&mut s);
    s
}

/// Reciprocal condition number of a symmetric PSD matrix, measured on its
/// equilibrated form. Returns 0 for an empty or zero matrix.
pub fn rcond_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let d = equilibration(a);
    let eig = scaled(a, &d).symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !min.is_finite() {
        return 0.0;
    }
    (min.max(0.0)) / max
}

/// Inverse of a symmetric positive-definite matrix, or `None` when the
/// matrix fails the [`RCOND_GATE`] test.
pub fn gated_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if rcond_sym(a) <= RCOND_GATE {
        return None;
    }
    let d = equilibration(a);
    let chol = scaled(a, &d).cholesky()?;
    let inv = chol.inverse();
    let mut out = scaled(&inv, &d);
    symmetrize(&mut out);
    Some(out)
}

/// Pseudo-inverse of a symmetric PSD matrix with eigenvalues below
/// `RCOND_GATE * max` discarded. The flag reports whether any direction
/// was discarded.
pub fn gated_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = a.nrows();
    let d = equilibration(a);
    let eig = scaled(a, &d).symmetric_eigen();
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    let mut inv = DMatrix::zeros(n, n);
    let mut deficient = false;
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if max > 0.0 && lambda > RCOND_GATE * max {
            let v = eig.eigenvectors.column(idx);
            inv += (v * v.transpose()) / lambda;
        } else {
            deficient = true;
        }
    }
    let mut out = scaled(&inv, &d);
    symmetrize(&mut out);
    (out, deficient)
}

/// Symmetric square root of a symmetric positive semi-definite matrix.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&roots) * v.transpose();
    symmetrize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn inverse_of_badly_scaled_spd() {
        let a = DMatrix::from_row_slice(3, 3, &[1e10, 1e4, 0.0, 1e4, 2.0, 1e-4, 0.0, 1e-4, 1e-6]);
        let inv = gated_inverse(&a).expect("invertible");
        let eye = &a * &inv;
        assert_relative_eq!(eye, DMatrix::identity(3, 3), epsilon = 1e-8);
    }

    #[test]
    fn singular_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(gated_inverse(&a).is_none());
        let (p, deficient) = gated_pinv(&a);
        assert!(deficient);
        assert_relative_eq!(&a * &p * &a, a, epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_pinv_is_zero() {
        let (p, deficient) = gated_pinv(&DMatrix::zeros(2, 2));
        assert!(deficient);
        assert_eq!(p, DMatrix::zeros(2, 2));
        assert_eq!(rcond_sym(&DMatrix::zeros(2, 2)), 0.0);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = sym_sqrt(&a);
        assert_relative_eq!(&r * &r, a, epsilon = 1e-12);
        assert_relative_eq!(r.clone(), r.transpose(), epsilon = 0.0);
    }
}
