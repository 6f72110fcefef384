//! Preconditioners for the two KRR systems and a dense condition-number
//! check for the preconditioned operator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_escalating, symmetric_eigenvalues, symmetrize, trace, EPS_MACH};
use crate::lowrank::PartialCholeskyFactor;
use crate::sketch::SparseSignEmbedding;

/// Largest dimension for which [`precond_condition_number`] forms dense matrices.
pub const DENSE_CHECK_LIMIT: usize = 2000;

/// The inverse action `v -> P^{-1} v` of a symmetric positive definite `P`.
pub trait Preconditioner: Sync {
    fn dim(&self) -> usize;
    fn apply_inverse(&self, v: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityPreconditioner {
    pub n: usize,
}

impl Preconditioner for IdentityPreconditioner {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply_inverse(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
    }
}

/// `P = U diag(sigma_sq) U* + mu I` from a Nystrom factor.
#[derive(Debug, Clone)]
pub struct RpcPreconditioner {
    pub u: DMatrix<f64>,
    pub sigma_sq: Vec<f64>,
    pub mu: f64,
}

/// Economy SVD of the factor: thin QR `F = Q R`, then the eigenvectors
/// of `R R*`. Zero singular values are kept.
pub fn build_rpc_preconditioner(factor: &PartialCholeskyFactor, mu: f64) -> Result<RpcPreconditioner> {
    RpcPreconditioner::from_matrix(&factor.f, mu)
}

impl RpcPreconditioner {
    pub fn from_matrix(f: &DMatrix<f64>, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(invalid("mu must be positive"));
        }
        let (n, r) = f.shape();
        if r == 0 {
            return Ok(Self { u: DMatrix::zeros(n, 0), sigma_sq: Vec::new(), mu });
        }
        if r > n {
            return Err(invalid(format!("factor has more columns ({r}) than rows ({n})")));
        }
        let qr = f.clone().qr();
        let q = qr.q();
        let r_factor = qr.r();
        // Left singular vectors of R from the eigenvectors of R R*. The
        // bidiagonal SVD loses about half the digits on tightly clustered
        // singular values, which shows up directly in the preconditioned
        // spectrum; the symmetric eigensolver stays at roundoff level.
        let mut gram = &r_factor * r_factor.transpose();
        symmetrize(&mut gram);
        let eig = gram.symmetric_eigen();
        if eig.eigenvalues.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite singular value".into()));
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let w = DMatrix::from_fn(r, r, |i, j| eig.eigenvectors[(i, order[j])]);
        let sigma_sq = order.iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
        Ok(Self { u: q * w, sigma_sq, mu })
    }

    /// `U diag(sigma_sq) U*`.
    pub fn approximation(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.u.nrows(), self.u.ncols(), |i, j| self.u[(i, j)] * self.sigma_sq[j]);
        scaled * self.u.transpose()
    }
}

impl Preconditioner for RpcPreconditioner {
    fn dim(&self) -> usize {
        self.u.nrows()
    }

    fn apply_inverse(&self, v: &[f64], out: &mut [f64]) {
        let inv_mu = 1.0 / self.mu;
        for (o, x) in out.iter_mut().zip(v) {
            *o = x * inv_mu;
        }
        if self.sigma_sq.is_empty() {
            return;
        }
        let v = DVector::from_column_slice(v);
        let mut t = self.u.tr_mul(&v);
        for (ti, s) in t.iter_mut().zip(&self.sigma_sq) {
            *ti *= 1.0 / (s + self.mu) - inv_mu;
        }
        let mut o = DVector::from_column_slice(out);
        o.gemv(1.0, &self.u, &t, 1.0);
        out.copy_from_slice(o.as_slice());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CholeskyKind {
    Krill,
    Falkon,
    Explicit,
}

/// `P = C C*` with `C` lower triangular; the inverse is two triangular solves.
#[derive(Debug, Clone)]
pub struct CholeskyPreconditioner {
    pub c: DMatrix<f64>,
    /// Diagonal shift that was added to `P` before factoring.
    pub jitter: f64,
    pub kind: CholeskyKind,
}

impl CholeskyPreconditioner {
    /// Factors `p + eps_mach tr(p) I`, escalating the shift tenfold up to
    /// `1e-8 tr(p)` before giving up.
    pub fn factor(mut p: DMatrix<f64>, kind: CholeskyKind) -> Result<Self> {
        if p.nrows() != p.ncols() || p.nrows() == 0 {
            return Err(invalid("preconditioner matrix must be square and nonempty"));
        }
        symmetrize(&mut p);
        let tr = trace(&p);
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::Numerical(format!("preconditioner trace is {tr}")));
        }
        let (c, jitter) = cholesky_escalating(&p, EPS_MACH * tr, 1e-8 * tr)?;
        Ok(Self { c, jitter, kind })
    }

    /// Wraps an existing lower-triangular factor with positive diagonal.
    pub fn from_lower(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(invalid("factor must be square"));
        }
        if (0..c.nrows()).any(|i| !(c[(i, i)] > 0.0)) {
            return Err(invalid("factor diagonal must be positive"));
        }
        Ok(Self { c: c.lower_triangle(), jitter: 0.0, kind: CholeskyKind::Explicit })
    }

    /// `C C*`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.c * self.c.transpose()
    }
}

impl Preconditioner for CholeskyPreconditioner {
    fn dim(&self) -> usize {
        self.c.nrows()
    }

    fn apply_inverse(&self, v: &[f64], out: &mut [f64]) {
        let mut x = DVector::from_column_slice(v);
        self.c.solve_lower_triangular_mut(&mut x);
        self.c.tr_solve_lower_triangular_mut(&mut x);
        out.copy_from_slice(x.as_slice());
    }
}

/// KRILL: `P = (Phi A(:,S))* (Phi A(:,S)) + mu A(S,S)`.
pub fn build_krill(
    a_cols: &DMatrix<f64>,
    phi: &SparseSignEmbedding,
    a_ss: &DMatrix<f64>,
    mu: f64,
) -> Result<CholeskyPreconditioner> {
    let y = phi.apply(a_cols)?;
    krill_from_sketch(&y, a_ss, mu)
}

/// KRILL from an already sketched `Y = Phi A(:,S)`.
pub fn krill_from_sketch(y: &DMatrix<f64>, a_ss: &DMatrix<f64>, mu: f64) -> Result<CholeskyPreconditioner> {
    check_square(a_ss, y.ncols())?;
    if !(mu > 0.0) {
        return Err(invalid("mu must be positive"));
    }
    let mut p = y.tr_mul(y);
    p += a_ss * mu;
    CholeskyPreconditioner::factor(p, CholeskyKind::Krill)
}

/// FALKON-style baseline for uniformly sampled centers:
/// `P = (N/k) A(S,S)^2 + mu A(S,S)`.
pub fn build_falkon(a_ss: &DMatrix<f64>, n: usize, mu: f64) -> Result<CholeskyPreconditioner> {
    let k = a_ss.nrows();
    check_square(a_ss, k)?;
    if k == 0 || n < k {
        return Err(invalid(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    if !(mu > 0.0) {
        return Err(invalid("mu must be positive"));
    }
    let mut p = falkon_gram(a_ss, n);
    p += a_ss * mu;
    CholeskyPreconditioner::factor(p, CholeskyKind::Falkon)
}

/// `(N/k) A(S,S)^2`, the uniform-sampling estimate of `A(S,:) A(:,S)`.
pub fn falkon_gram(a_ss: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = a_ss.nrows();
    (a_ss * a_ss) * (n as f64 / k as f64)
}

fn check_square(m: &DMatrix<f64>, k: usize) -> Result<()> {
    if m.nrows() != k || m.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, found: m.nrows().max(m.ncols()) });
    }
    Ok(())
}

/// Dense `P^{-1}` assembled column by column from the inverse action and
/// symmetrized.
pub fn dense_inverse(p: &dyn Preconditioner) -> DMatrix<f64> {
    let n = p.dim();
    let mut inv = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        p.apply_inverse(&e, inv.column_mut(j).as_mut_slice());
        e[j] = 0.0;
    }
    symmetrize(&mut inv);
    inv
}

/// Eigenvalues (ascending) of the generalized problem `M z = lambda P z`,
/// using only the inverse action of `P`: with `P^{-1} = L L*`, they are
/// the eigenvalues of `L* M L`.
pub fn preconditioned_spectrum(m: &DMatrix<f64>, p: &dyn Preconditioner) -> Result<Vec<f64>> {
    let n = m.nrows();
    if m.ncols() != n || p.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: p.dim() });
    }
    if n > DENSE_CHECK_LIMIT {
        return Err(invalid(format!("dimension {n} exceeds the dense check limit {DENSE_CHECK_LIMIT}")));
    }
    let inv = dense_inverse(p);
    let root = match inv.clone().cholesky() {
        Some(c) => c.unpack(),
        None => {
            // Fall back to a symmetric square root when P^{-1} is only
            // semidefinite in floating point.
            let eig = inv.symmetric_eigen();
            let mut v = eig.eigenvectors;
            for (j, lam) in eig.eigenvalues.iter().enumerate() {
                let s = lam.max(0.0).sqrt();
                v.column_mut(j).scale_mut(s);
            }
            v
        }
    };
    let mut core = root.transpose() * m * &root;
    symmetrize(&mut core);
    symmetric_eigenvalues(&core)
}

/// Condition number of `P^{-1/2} M P^{-1/2}`.
pub fn precond_condition_number(m: &DMatrix<f64>, p: &dyn Preconditioner) -> Result<f64> {
    let (lo, hi) = preconditioned_extremes(m, p)?;
    Ok(hi / lo)
}

/// Smallest and largest eigenvalue of `P^{-1/2} M P^{-1/2}`.
pub fn preconditioned_extremes(m: &DMatrix<f64>, p: &dyn Preconditioner) -> Result<(f64, f64)> {
    let eigs = preconditioned_spectrum(m, p)?;
    let (lo, hi) = (eigs[0], eigs[eigs.len() - 1]);
    if !(lo > 0.0) {
        return Err(Error::Numerical(format!(
            "preconditioned operator is not positive definite (min eigenvalue {lo:e})"
        )));
    }
    Ok((lo, hi))
}
