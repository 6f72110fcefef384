//! Small dense helpers shared by the factorization, preconditioner and
//! diagnostics modules. Everything here works on `nalgebra::DMatrix<f64>`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Working-precision machine epsilon (about 2.2e-16).
pub const EPS_MACH: f64 = f64::EPSILON;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

/// Eigenvalues of a symmetric matrix, sorted ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut eigs: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    if eigs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue".into()));
    }
    eigs.sort_by(f64::total_cmp);
    Ok(eigs)
}

/// Lower Cholesky factor of `p + jitter * I`, escalating the jitter by 10x
/// from `start` until it exceeds `max`. Returns the factor and the jitter
/// actually used (`start` on first-try success).
pub fn cholesky_escalating(p: &DMatrix<f64>, start: f64, max: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = p.nrows();
    let mut jitter = start;
    loop {
        let mut shifted = p.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = shifted.cholesky() {
            let l = chol.unpack();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, jitter));
            }
        }
        if jitter >= max {
            return Err(Error::Numerical(format!("Cholesky failed with jitter up to {jitter:e}")));
        }
        jitter = if jitter > 0.0 { (jitter * 10.0).min(max) } else { max.min(EPS_MACH) };
    }
}

/// Orthonormal basis (thin Q factor) for the column space of `m`.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// Haar-distributed random orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// `Q diag(spectrum) Q*` for a random orthogonal `Q`.
pub fn psd_with_spectrum<R: Rng + ?Sized>(spectrum: &[f64], rng: &mut R) -> DMatrix<f64> {
    let n = spectrum.len();
    let q = random_orthogonal(n, rng);
    let scaled = DMatrix::from_fn(n, n, |i, j| q[(i, j)] * spectrum[j]);
    let mut a = scaled * q.transpose();
    symmetrize(&mut a);
    a
}

/// Largest absolute entry of `Q*Q - I`.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    let k = gram.nrows();
    let mut worst = 0.0f64;
    for j in 0..k {
        for i in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
