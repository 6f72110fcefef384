//! Preconditioned conjugate gradient over abstract operator and
//! preconditioner actions.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::precond::Preconditioner;

/// A symmetric positive (semi)definite operator `x -> M x`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.nrows();
        let data = self.as_slice();
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += data[j * n + i] * xj;
            }
            *o = acc;
        });
    }
}

/// Operator defined by a closure.
pub struct FnOperator<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> FnOperator<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgOptions {
    /// Relative residual tolerance.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Recompute `||b - M beta|| / ||b||` every this many iterations.
    pub true_residual_every: Option<usize>,
}

impl PcgOptions {
    pub fn new(epsilon: f64, max_iter: usize) -> Self {
        Self { epsilon, max_iter, true_residual_every: None }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub solution: Vec<f64>,
    /// `||r_t|| / ||b||` for t = 0..=iterations.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
    /// `(iteration, ||b - M beta|| / ||b||)` samples of the true residual.
    pub true_residuals: Vec<(usize, f64)>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl SolveReport {
    pub fn wall_seconds(&self) -> f64 {
        self.setup_seconds + self.solve_seconds
    }

    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }

    /// First iteration whose relative residual is below `eps`.
    pub fn iterations_to(&self, eps: f64) -> Option<usize> {
        self.residual_history.iter().position(|&r| r < eps)
    }
}

/// Solves `M beta = b` by preconditioned CG starting from `beta = 0`.
/// Stops when the recursively updated residual satisfies
/// `||r|| < epsilon ||b||` or after `max_iter` iterations.
pub fn pcg(op: &dyn LinearOperator, b: &[f64], precond: &dyn Preconditioner, opts: &PcgOptions) -> Result<SolveReport> {
    pcg_observed(op, b, precond, opts, &mut |_, _| {})
}

/// [`pcg`] that also hands every iterate `(t, beta_t)`, including
/// `beta_0 = 0`, to `observer`.
pub fn pcg_observed(
    op: &dyn LinearOperator,
    b: &[f64],
    precond: &dyn Preconditioner,
    opts: &PcgOptions,
    observer: &mut dyn FnMut(usize, &[f64]),
) -> Result<SolveReport> {
    let n = b.len();
    if op.dim() != n {
        return Err(Error::DimensionMismatch { expected: op.dim(), found: n });
    }
    if precond.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: precond.dim() });
    }
    if !(opts.epsilon > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(invalid("right-hand side has non-finite entries"));
    }
    let start = Instant::now();
    let mut beta = vec![0.0; n];
    observer(0, &beta);
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(SolveReport {
            solution: beta,
            residual_history: vec![0.0],
            converged: true,
            solve_seconds: start.elapsed().as_secs_f64(),
            ..SolveReport::default()
        });
    }

    let breakdown = |iteration: usize, reason: String| Error::Breakdown { iteration, reason };
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond.apply_inverse(&r, &mut z);
    let mut p = z.clone();
    let mut omega = dot(&z, &r);
    let mut v = vec![0.0; n];
    let mut history = vec![1.0];
    let mut true_residuals = Vec::new();
    let mut rel = 1.0;
    let mut t = 0;

    if !omega.is_finite() {
        return Err(breakdown(0, format!("non-finite preconditioned residual (omega = {omega})")));
    }
    if omega <= 0.0 {
        return Err(breakdown(0, format!("preconditioner is not positive definite (omega = {omega:e})")));
    }

    while rel >= opts.epsilon && t < opts.max_iter {
        op.apply(&p, &mut v);
        let curvature = dot(&v, &p);
        if !curvature.is_finite() {
            return Err(breakdown(t + 1, "non-finite operator product".into()));
        }
        if curvature <= 0.0 {
            return Err(breakdown(t + 1, format!("operator is not positive definite (p*Mp = {curvature:e})")));
        }
        let alpha = omega / curvature;
        axpy(alpha, &p, &mut beta);
        axpy(-alpha, &v, &mut r);
        t += 1;
        rel = norm(&r) / b_norm;
        if !rel.is_finite() || beta.iter().any(|x| !x.is_finite()) {
            return Err(breakdown(t, "non-finite iterate".into()));
        }
        history.push(rel);
        observer(t, &beta);
        if let Some(every) = opts.true_residual_every {
            if every > 0 && t % every == 0 {
                true_residuals.push((t, true_residual(op, b, &beta, b_norm)));
            }
        }
        if rel < opts.epsilon {
            break;
        }
        precond.apply_inverse(&r, &mut z);
        let omega_next = dot(&z, &r);
        if !omega_next.is_finite() {
            return Err(breakdown(t, "non-finite preconditioned residual".into()));
        }
        if omega_next <= 0.0 {
            return Err(breakdown(t, format!("preconditioner is not positive definite (omega = {omega_next:e})")));
        }
        let ratio = omega_next / omega;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + ratio * *pi;
        }
        omega = omega_next;
    }

    Ok(SolveReport {
        solution: beta,
        converged: rel < opts.epsilon,
        residual_history: history,
        iterations: t,
        solve_seconds: start.elapsed().as_secs_f64(),
        true_residuals,
        ..SolveReport::default()
    })
}

fn true_residual(op: &dyn LinearOperator, b: &[f64], beta: &[f64], b_norm: f64) -> f64 {
    let mut mb = vec![0.0; b.len()];
    op.apply(beta, &mut mb);
    let s: f64 = b.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    s.sqrt() / b_norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::psd_with_spectrum;
    use crate::precond::{CholeskyKind, CholeskyPreconditioner, IdentityPreconditioner};
    use nalgebra::{dmatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, cond: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec: Vec<f64> = (0..n).map(|i| cond.powf(-(i as f64) / (n - 1) as f64)).collect();
        psd_with_spectrum(&spec, &mut rng)
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn m_norm(m: &DMatrix<f64>, e: &DVector<f64>) -> f64 {
        e.dot(&(m * e)).max(0.0).sqrt()
    }

    #[test]
    fn identity_system_one_iteration() {
        let m = DMatrix::<f64>::identity(5, 5);
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let rep = pcg(&m, &b, &IdentityPreconditioner { n: 5 }, &PcgOptions::new(1e-10, 10)).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert_eq!(rep.solution, b.to_vec());
        assert_eq!(rep.residual_history.len(), 2);
    }

    #[test]
    fn diagonal_two_by_two() {
        let m = dmatrix![1.0, 0.0; 0.0, 2.0];
        let rep = pcg(&m, &[1.0, 2.0], &IdentityPreconditioner { n: 2 }, &PcgOptions::new(1e-12, 10)).unwrap();
        assert!(rep.iterations <= 2);
        assert!((rep.solution[0] - 1.0).abs() < 1e-12 && (rep.solution[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_preconditioner_one_iteration() {
        let m = random_spd(100, 1e4, 1);
        let p = CholeskyPreconditioner::factor(m.clone(), CholeskyKind::Explicit).unwrap();
        let rep = pcg(&m, &random_vec(100, 2), &p, &PcgOptions::new(1e-8, 50)).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
    }

    #[test]
    fn zero_rhs_returns_immediately() {
        let m = random_spd(10, 10.0, 3);
        let rep = pcg(&m, &[0.0; 10], &IdentityPreconditioner { n: 10 }, &PcgOptions::new(1e-8, 50)).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert!(rep.solution.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn finite_termination() {
        let n = 40;
        let m = random_spd(n, 10.0, 4);
        let b = random_vec(n, 5);
        let want = m.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let mut at_n = None;
        let opts = PcgOptions::new(1e-300, n);
        pcg_observed(&m, &b, &IdentityPreconditioner { n }, &opts, &mut |t, beta| {
            if t == n {
                at_n = Some(beta.to_vec());
            }
        })
        .unwrap();
        let got = DVector::from_vec(at_n.unwrap());
        assert!((got - &want).norm() <= 1e-8 * want.norm());
    }

    #[test]
    fn error_is_monotone_in_m_norm() {
        let n = 30;
        let m = random_spd(n, 1e3, 6);
        let b = random_vec(n, 7);
        let want = m.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let mut errs = Vec::new();
        pcg_observed(&m, &b, &IdentityPreconditioner { n }, &PcgOptions::new(1e-12, 200), &mut |_, beta| {
            errs.push(m_norm(&m, &(DVector::from_column_slice(beta) - &want)));
        })
        .unwrap();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10) + 1e-14);
        }
    }

    #[test]
    fn breakdown_on_indefinite_operator() {
        let m = dmatrix![1.0, 0.0; 0.0, -1.0];
        let err = pcg(&m, &[0.0, 1.0], &IdentityPreconditioner { n: 2 }, &PcgOptions::new(1e-8, 10)).unwrap_err();
        assert!(matches!(err, Error::Breakdown { iteration: 1, .. }));
    }

    #[test]
    fn breakdown_on_non_finite_operator() {
        let op = FnOperator::new(2, |_x: &[f64], out: &mut [f64]| out.fill(f64::NAN));
        let err = pcg(&op, &[1.0, 1.0], &IdentityPreconditioner { n: 2 }, &PcgOptions::new(1e-8, 10)).unwrap_err();
        assert!(matches!(err, Error::Breakdown { .. }));
    }

    #[test]
    fn rejects_bad_input() {
        let m = DMatrix::<f64>::identity(3, 3);
        let id = IdentityPreconditioner { n: 3 };
        assert!(pcg(&m, &[1.0, 2.0], &id, &PcgOptions::new(1e-8, 5)).is_err());
        assert!(pcg(&m, &[1.0, f64::NAN, 0.0], &id, &PcgOptions::new(1e-8, 5)).is_err());
        assert!(pcg(&m, &[1.0, 2.0, 3.0], &id, &PcgOptions::new(0.0, 5)).is_err());
        assert!(pcg(&m, &[1.0, 2.0, 3.0], &IdentityPreconditioner { n: 2 }, &PcgOptions::new(1e-8, 5)).is_err());
    }

    #[test]
    fn max_iter_stops_unconverged() {
        let n = 50;
        let m = random_spd(n, 1e6, 8);
        let rep = pcg(&m, &random_vec(n, 9), &IdentityPreconditioner { n }, &PcgOptions::new(1e-12, 3)).unwrap();
        assert_eq!(rep.iterations, 3);
        assert!(!rep.converged);
        assert_eq!(rep.residual_history.len(), 4);
    }

    #[test]
    fn true_residual_tracks_recursive_residual() {
        let n = 60;
        let m = random_spd(n, 1e2, 10);
        let opts = PcgOptions { epsilon: 1e-10, max_iter: 100, true_residual_every: Some(5) };
        let rep = pcg(&m, &random_vec(n, 11), &IdentityPreconditioner { n }, &opts).unwrap();
        assert!(!rep.true_residuals.is_empty());
        for &(t, tr) in &rep.true_residuals {
            assert!((tr - rep.residual_history[t]).abs() < 1e-8);
        }
    }

    #[test]
    fn converged_flag_matches_history() {
        let n = 20;
        let m = random_spd(n, 50.0, 12);
        let rep = pcg(&m, &random_vec(n, 13), &IdentityPreconditioner { n }, &PcgOptions::new(1e-6, 100)).unwrap();
        assert_eq!(rep.residual_history.len(), rep.iterations + 1);
        assert_eq!(rep.converged, rep.final_residual() < 1e-6);
        assert_eq!(rep.iterations_to(1e-6), Some(rep.iterations));
    }
}
