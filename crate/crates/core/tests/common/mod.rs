//! Independent oracles shared by the integration tests. Everything here is
//! deliberately written against the plain definitions (Gaussian elimination,
//! Taylor series, Kronecker products, central differences) rather than the
//! library's own routines, so the two sides of every check stay independent.

#![allow(dead_code)]

use nalgebra::{Complex, DMatrix, DVector};

pub type C64 = Complex<f64>;

/// Matrix exponential by scaling and squaring with a plain Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.amax() * n as f64;
    let squarings = norm.log2().ceil().max(0.0) as u32 + 4;
    let scaled = a / 2f64.powi(squarings as i32);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = DMatrix::<f64>::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    let mut out = sum;
    for _ in 0..squarings {
        out = &out * &out;
    }
    out
}

/// Solve A X + X A^T = -Q via the Kronecker-product linear system.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut big = DMatrix::<f64>::zeros(n * n, n * n);
    // vec(AX) = (I kron A) vec(X); vec(X A^T) = (A kron I) vec(X)
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                big[(k * n + i, k * n + j)] += a[(i, j)];
                big[(j * n + i, k * n + i)] += a[(j, k)];
            }
        }
    }
    let rhs = DVector::from_fn(n * n, |t, _| -q[(t % n, t / n)]);
    let x = big.lu().solve(&rhs).expect("lyapunov system is solvable");
    DMatrix::from_fn(n, n, |i, j| x[j * n + i])
}

/// Dense complex inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_inverse(a: &DMatrix<C64>) -> DMatrix<C64> {
    let n = a.nrows();
    let mut work = a.clone();
    let mut inv = DMatrix::<C64>::identity(n, n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                work[(i, col)]
                    .norm()
                    .partial_cmp(&work[(j, col)].norm())
                    .unwrap()
            })
            .unwrap();
        assert!(work[(pivot, col)].norm() > 0.0, "singular oracle input");
        if pivot != col {
            work.swap_rows(pivot, col);
            inv.swap_rows(pivot, col);
        }
        let d = work[(col, col)];
        for j in 0..n {
            work[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = work[(i, col)];
            if f.norm() == 0.0 {
                continue;
            }
            for j in 0..n {
                let w = work[(col, j)];
                let v = inv[(col, j)];
                work[(i, j)] -= f * w;
                inv[(i, j)] -= f * v;
            }
        }
    }
    inv
}

/// Complex-power injections S = diag(v) conj(Y v), the alternative route to
/// the polar sums.
pub fn complex_power_injections(
    y: &DMatrix<C64>,
    v: &DVector<f64>,
    delta: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = v.len();
    let phasor = DVector::from_fn(n, |i, _| C64::from_polar(v[i], delta[i]));
    let current = y * &phasor;
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for i in 0..n {
        let s = phasor[i] * current[i].conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}

/// Closed-form single-phase two-bus power flow: slack at 1 pu / 0 rad, branch
/// admittance y, load (p, q) at the far bus. Returns (V, delta).
pub fn two_bus_closed_form(y: C64, p: f64, q: f64) -> (f64, f64) {
    // with W the far-bus phasor: S = conj(y) (|W|^2 - W), so
    // W = |W|^2 - S / conj(y); writing u = |W|^2 gives
    // u^2 - u (2 Re c + 1) + |c|^2 = 0 with c = S / conj(y).
    let c = C64::new(p, q) / y.conj();
    let b = 2.0 * c.re + 1.0;
    let disc = b * b - 4.0 * c.norm_sqr();
    assert!(disc >= 0.0, "two-bus case must be feasible");
    let u = 0.5 * (b + disc.sqrt());
    let w = C64::new(u, 0.0) - c;
    (w.norm(), w.arg())
}

/// Central finite difference of a scalar-vector function.
pub fn central_difference<F>(f: F, x0: f64, step: f64) -> DVector<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    (f(x0 + step) - f(x0 - step)) / (2.0 * step)
}

/// Relative error with an absolute floor, for mixed-scale comparisons.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// Deterministic pseudo-random stream for test fixtures (xorshift-multiply,
/// independent of the library's RNG choices).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [-1, 1).
    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.uniform() - 1.0
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// A random stable matrix: scaled Gaussian entries shifted left of the
/// imaginary axis by its largest real eigenvalue part plus a margin.
pub fn random_stable_matrix(rng: &mut TestRng, n: usize, margin: f64) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(n, n, |_, _| rng.normal() / (n as f64).sqrt());
    let max_re = raw
        .complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = raw;
    for i in 0..n {
        out[(i, i)] -= max_re + margin;
    }
    out
}

/// A random symmetric positive definite matrix.
pub fn random_spd(rng: &mut TestRng, n: usize) -> DMatrix<f64> {
    let w = DMatrix::from_fn(n, n, |_, _| rng.normal());
    &w * w.transpose() + DMatrix::identity(n, n) * 0.1
}
