//! Dense linear-algebra helpers: principal matrix logarithm via complex Schur
//! decomposition, pseudo-inverse, and condition number estimates.

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

type C64 = Complex<f64>;

#[derive(Debug, Error)]
pub enum LinalgError {
    /// An eigenvalue lies on the closed negative real axis, so the principal
    /// logarithm does not exist.
    #[error(
        "matrix logarithm undefined: eigenvalue {re:+e}{im:+e}i on the closed negative real axis"
    )]
    LogBranch { re: f64, im: f64 },
    #[error("Schur decomposition did not converge")]
    SchurFailure,
}

/// Result of a real matrix logarithm: the real part and the largest imaginary
/// residue discarded during re-realization.
#[derive(Debug, Clone)]
pub struct RealLog {
    pub matrix: DMatrix<f64>,
    pub imag_residue: f64,
}

/// Principal logarithm of a real square matrix with eigenvalues off the closed
/// negative real axis.
///
/// Complex Schur decomposition, then the principal log of the triangular
/// factor by repeated triangular square roots until `||T - I|| < 1/4` followed
/// by a truncated Mercator series, scaled back by the number of square roots.
/// Nonsymmetric inputs are fine; no eigenvector conditioning enters.
pub fn log_matrix_real(m: &DMatrix<f64>) -> Result<RealLog, LinalgError> {
    assert!(m.is_square(), "log_matrix_real requires a square matrix");
    let n = m.nrows();
    let mc = DMatrix::<C64>::from_fn(n, n, |i, j| C64::new(m[(i, j)], 0.0));
    let schur = mc
        .try_schur(f64::EPSILON, 10_000)
        .ok_or(LinalgError::SchurFailure)?;
    let (q, t) = schur.unpack();

    for i in 0..n {
        let lam = t[(i, i)];
        if lam.re <= 0.0 && lam.im.abs() <= 1e-14 * (1.0 + lam.norm()) {
            return Err(LinalgError::LogBranch {
                re: lam.re,
                im: lam.im,
            });
        }
    }

    let log_t = triangular_log(&t);
    let full = &q * log_t * q.adjoint();

    let mut imag_residue = 0.0f64;
    let real = DMatrix::<f64>::from_fn(n, n, |i, j| {
        imag_residue = imag_residue.max(full[(i, j)].im.abs());
        full[(i, j)].re
    });
    Ok(RealLog {
        matrix: real,
        imag_residue,
    })
}

/// Principal log of an upper-triangular complex matrix by inverse scaling and
/// squaring: sqrt until close to the identity, Mercator series, double back.
fn triangular_log(t: &DMatrix<C64>) -> DMatrix<C64> {
    let n = t.nrows();
    let mut tc = t.clone();
    let mut halvings = 0u32;
    while dist_from_identity(&tc) > 0.25 && halvings < 64 {
        tc = triangular_sqrt(&tc);
        halvings += 1;
    }

    // log(I + X) = X - X^2/2 + X^3/3 - ...
    let mut x = tc;
    for i in 0..n {
        x[(i, i)] -= C64::new(1.0, 0.0);
    }
    let mut term = x.clone();
    let mut out = x.clone();
    for k in 2..64usize {
        term *= &x;
        let coeff = if k % 2 == 0 { -1.0 } else { 1.0 } / k as f64;
        let mut term_norm = 0.0f64;
        for (o, t) in out.iter_mut().zip(term.iter()) {
            *o += t * coeff;
            term_norm = term_norm.max(t.norm());
        }
        if term_norm / k as f64 <= f64::EPSILON {
            break;
        }
    }
    out * C64::new(2f64.powi(halvings as i32), 0.0)
}

/// Upper-triangular principal square root (Bjorck-Hammarling recurrence).
fn triangular_sqrt(t: &DMatrix<C64>) -> DMatrix<C64> {
    let n = t.nrows();
    let mut r = DMatrix::<C64>::zeros(n, n);
    for i in 0..n {
        r[(i, i)] = t[(i, i)].sqrt();
    }
    for off in 1..n {
        for i in 0..n - off {
            let j = i + off;
            let mut s = t[(i, j)];
            for k in i + 1..j {
                s -= r[(i, k)] * r[(k, j)];
            }
            r[(i, j)] = s / (r[(i, i)] + r[(j, j)]);
        }
    }
    r
}

fn dist_from_identity(t: &DMatrix<C64>) -> f64 {
    // max column sum of |T - I|
    let n = t.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            let mut v = t[(i, j)];
            if i == j {
                v -= C64::new(1.0, 0.0);
            }
            col += v.norm();
        }
        worst = worst.max(col);
    }
    worst
}

/// Moore-Penrose pseudo-inverse with a relative singular value cutoff.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_eps: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = rel_eps * smax.max(f64::MIN_POSITIVE);
    m.clone()
        .pseudo_inverse(eps)
        .expect("SVD-based pseudo-inverse cannot fail after svd succeeded")
}

/// 2-norm condition number of a complex matrix.
pub fn condition_number(m: &DMatrix<C64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_of_identity_is_zero() {
        let m = DMatrix::<f64>::identity(4, 4);
        let log = log_matrix_real(&m).unwrap();
        assert!(log.matrix.norm() < 1e-14);
        assert!(log.imag_residue < 1e-14);
    }

    #[test]
    fn log_of_scalar_exponential() {
        let m = DMatrix::from_element(1, 1, (-2.0f64).exp());
        let log = log_matrix_real(&m).unwrap();
        assert_relative_eq!(log.matrix[(0, 0)], -2.0, max_relative = 1e-12);
    }

    #[test]
    fn log_inverts_diagonalizable_exponential() {
        // exp of a rotation-plus-decay block has a known log
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 1.2, -1.2, -0.5]);
        // exp(At) for this block: e^{-0.5}[cos 1.2, sin 1.2; -sin 1.2, cos 1.2]
        let s = (-0.5f64).exp();
        let e = DMatrix::from_row_slice(
            2,
            2,
            &[
                s * 1.2f64.cos(),
                s * 1.2f64.sin(),
                -s * 1.2f64.sin(),
                s * 1.2f64.cos(),
            ],
        );
        let log = log_matrix_real(&e).unwrap();
        assert!((log.matrix - a).norm() < 1e-12);
    }

    #[test]
    fn negative_real_eigenvalue_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 2.0]);
        assert!(matches!(
            log_matrix_real(&m),
            Err(LinalgError::LogBranch { .. })
        ));
    }

    #[test]
    fn pseudo_inverse_satisfies_projection_identity() {
        let m = DMatrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 0.7).sin());
        let p = pseudo_inverse(&m, 1e-13);
        assert!((&m * &p * &m - &m).norm() < 1e-10);
    }
}
