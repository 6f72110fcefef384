//! Full-data and restricted kernel ridge regression drivers, center
//! selection, prediction and scoring.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_len, invalid, Error, Result};
use crate::kernel::{rows_per_block, Dataset, KernelOracle, KernelSpec};
use crate::lowrank::{build_factor, PivotRule};
use crate::pcg::{pcg, FnOperator, PcgOptions, SolveReport};
use crate::precond::{
    build_falkon, build_rpc_preconditioner, krill_from_sketch, IdentityPreconditioner, Preconditioner,
};
use crate::sketch::{EmbeddingParams, SparseSignEmbedding};

/// Default bytes allowed for stored kernel blocks (256 MiB).
pub const DEFAULT_MEMORY_BUDGET: usize = 256 << 20;

/// `(A + mu I) beta = y`.
pub struct FullKrrProblem<'a> {
    pub oracle: &'a dyn KernelOracle,
    pub y: &'a [f64],
    pub mu: f64,
    pub rank: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    /// `None` runs unpreconditioned CG.
    pub pivot_rule: Option<PivotRule>,
    pub true_residual_every: Option<usize>,
}

impl<'a> FullKrrProblem<'a> {
    /// Defaults: RPCholesky with the default block size and seed 0,
    /// `epsilon = 1e-3`, 250 iterations.
    pub fn new(oracle: &'a dyn KernelOracle, y: &'a [f64], mu: f64, rank: usize) -> Self {
        Self {
            oracle,
            y,
            mu,
            rank,
            epsilon: 1e-3,
            max_iter: 250,
            pivot_rule: Some(PivotRule::RpCholesky { block: crate::lowrank::default_block_size(rank), seed: 0 }),
            true_residual_every: None,
        }
    }
}

pub fn solve_full_krr(problem: &FullKrrProblem) -> Result<SolveReport> {
    let n = problem.oracle.size();
    check_len(n, problem.y.len())?;
    if !(problem.mu > 0.0 && problem.mu.is_finite()) {
        return Err(invalid("mu must be positive"));
    }
    let setup = Instant::now();
    let mut meta = serde_json::Map::new();
    meta.insert("mu".into(), json!(problem.mu));
    let precond: Box<dyn Preconditioner> = match problem.pivot_rule {
        Some(rule) => {
            if problem.rank == 0 || problem.rank > n {
                return Err(invalid(format!("rank must be in 1..={n}, got {}", problem.rank)));
            }
            let factor = build_factor(problem.oracle, problem.rank, rule)?;
            meta.insert("preconditioner".into(), json!(rule.name()));
            meta.insert("rank_requested".into(), json!(problem.rank));
            meta.insert("rank".into(), json!(factor.rank()));
            meta.insert("trace_residual".into(), json!(factor.residual_trace()));
            Box::new(build_rpc_preconditioner(&factor, problem.mu)?)
        }
        None => {
            meta.insert("preconditioner".into(), json!("none"));
            Box::new(IdentityPreconditioner { n })
        }
    };
    let setup_seconds = setup.elapsed().as_secs_f64();
    let mu = problem.mu;
    let op = FnOperator::new(n, |x: &[f64], out: &mut [f64]| {
        problem.oracle.matvec(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += mu * xi;
        }
    });
    let opts = PcgOptions {
        epsilon: problem.epsilon,
        max_iter: problem.max_iter,
        true_residual_every: problem.true_residual_every,
    };
    let mut report = pcg(&op, problem.y, precond.as_ref(), &opts)?;
    report.setup_seconds = setup_seconds;
    report.metadata.extend(meta);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictedPreconditioner {
    Krill,
    Falkon,
    None,
}

impl RestrictedPreconditioner {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Krill => "krill",
            Self::Falkon => "falkon",
            Self::None => "none",
        }
    }
}

/// `[A(S,:) A(:,S) + mu A(S,S)] beta = A(S,:) y` on the centers `S`.
pub struct RestrictedKrrProblem<'a> {
    pub oracle: &'a dyn KernelOracle,
    pub centers: &'a [usize],
    pub y: &'a [f64],
    pub mu: f64,
    pub embedding: EmbeddingParams,
    pub embedding_seed: u64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub preconditioner: RestrictedPreconditioner,
    /// Bytes allowed for storing `A(:,S)`; beyond that it is regenerated
    /// in row blocks on every product.
    pub memory_budget: usize,
    pub true_residual_every: Option<usize>,
}

impl<'a> RestrictedKrrProblem<'a> {
    /// Defaults: KRILL with `d = 2k`, `zeta = min(8, 2k)`, seed 0,
    /// `epsilon = 1e-4`, 100 iterations.
    pub fn new(oracle: &'a dyn KernelOracle, centers: &'a [usize], y: &'a [f64], mu: f64) -> Self {
        Self {
            oracle,
            centers,
            y,
            mu,
            embedding: EmbeddingParams::practical(centers.len()),
            embedding_seed: 0,
            epsilon: 1e-4,
            max_iter: 100,
            preconditioner: RestrictedPreconditioner::Krill,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            true_residual_every: None,
        }
    }
}

/// `A(:,S)`, either held in memory or regenerated in row blocks.
pub struct CenterColumns<'a> {
    oracle: &'a dyn KernelOracle,
    centers: &'a [usize],
    stored: Option<DMatrix<f64>>,
    block_rows: usize,
}

impl<'a> CenterColumns<'a> {
    pub fn new(oracle: &'a dyn KernelOracle, centers: &'a [usize], memory_budget: usize) -> Result<Self> {
        let n = oracle.size();
        let k = centers.len();
        let stored =
            if n.saturating_mul(k).saturating_mul(8) <= memory_budget { Some(oracle.columns(centers)?) } else { None };
        Ok(Self { oracle, centers, stored, block_rows: rows_per_block(memory_budget, k) })
    }

    pub fn is_stored(&self) -> bool {
        self.stored.is_some()
    }

    fn for_each_block(&self, mut f: impl FnMut(usize, &DMatrix<f64>)) {
        match &self.stored {
            Some(m) => f(0, m),
            None => {
                let n = self.oracle.size();
                let mut start = 0;
                while start < n {
                    let end = (start + self.block_rows).min(n);
                    f(start, &self.oracle.block(start..end, self.centers));
                    start = end;
                }
            }
        }
    }

    /// `A(S,:) v` for a length-N vector.
    pub fn tr_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut acc = DVector::zeros(self.centers.len());
        self.for_each_block(|start, b| {
            let part = DVector::from_column_slice(&v[start..start + b.nrows()]);
            acc.gemv_tr(1.0, b, &part, 1.0);
        });
        acc.as_slice().to_vec()
    }

    /// `A(S,:) A(:,S) x`.
    pub fn gram_mul(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        let mut acc = DVector::zeros(self.centers.len());
        self.for_each_block(|_, b| {
            let u = b * &x;
            acc.gemv_tr(1.0, b, &u, 1.0);
        });
        acc.as_slice().to_vec()
    }

    /// `Phi A(:,S)`.
    pub fn sketch(&self, phi: &SparseSignEmbedding) -> Result<DMatrix<f64>> {
        if let Some(m) = &self.stored {
            return phi.apply(m);
        }
        let mut out = DMatrix::zeros(phi.d(), self.centers.len());
        let mut status = Ok(());
        self.for_each_block(|start, b| {
            if status.is_ok() {
                status = phi.accumulate_rows(start, b, &mut out);
            }
        });
        status.map(|_| out)
    }
}

/// `A(S,S)`.
pub fn center_block(oracle: &dyn KernelOracle, centers: &[usize]) -> DMatrix<f64> {
    let k = centers.len();
    DMatrix::from_fn(k, k, |i, j| oracle.entry(centers[i], centers[j]))
}

fn validate_centers(centers: &[usize], n: usize) -> Result<()> {
    if centers.is_empty() {
        return Err(invalid("at least one center is required"));
    }
    let mut seen = vec![false; n];
    for &c in centers {
        if c >= n {
            return Err(Error::IndexOutOfRange { index: c, len: n });
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(invalid(format!("center {c} appears more than once")));
        }
    }
    Ok(())
}

pub fn solve_restricted_krr(problem: &RestrictedKrrProblem) -> Result<SolveReport> {
    let n = problem.oracle.size();
    check_len(n, problem.y.len())?;
    validate_centers(problem.centers, n)?;
    if !(problem.mu > 0.0 && problem.mu.is_finite()) {
        return Err(invalid("mu must be positive"));
    }
    let k = problem.centers.len();
    let setup = Instant::now();
    let cols = CenterColumns::new(problem.oracle, problem.centers, problem.memory_budget)?;
    let a_ss = center_block(problem.oracle, problem.centers);
    let rhs = cols.tr_mul(problem.y);

    let mut meta = serde_json::Map::new();
    meta.insert("mu".into(), json!(problem.mu));
    meta.insert("centers".into(), json!(k));
    meta.insert("preconditioner".into(), json!(problem.preconditioner.name()));
    meta.insert("columns_stored".into(), json!(cols.is_stored()));
    let precond: Box<dyn Preconditioner> = match problem.preconditioner {
        RestrictedPreconditioner::Krill => {
            let phi = SparseSignEmbedding::with_params(problem.embedding, n, problem.embedding_seed)?;
            let p = krill_from_sketch(&cols.sketch(&phi)?, &a_ss, problem.mu)?;
            meta.insert("embedding_d".into(), json!(problem.embedding.d));
            meta.insert("embedding_zeta".into(), json!(problem.embedding.zeta));
            meta.insert("jitter".into(), json!(p.jitter));
            Box::new(p)
        }
        RestrictedPreconditioner::Falkon => {
            let p = build_falkon(&a_ss, n, problem.mu)?;
            meta.insert("jitter".into(), json!(p.jitter));
            Box::new(p)
        }
        RestrictedPreconditioner::None => Box::new(IdentityPreconditioner { n: k }),
    };
    let setup_seconds = setup.elapsed().as_secs_f64();

    let mu = problem.mu;
    let op = FnOperator::new(k, |x: &[f64], out: &mut [f64]| {
        let g = cols.gram_mul(x);
        let reg = &a_ss * DVector::from_column_slice(x);
        for ((o, gi), ri) in out.iter_mut().zip(&g).zip(reg.iter()) {
            *o = gi + mu * ri;
        }
    });
    let opts = PcgOptions {
        epsilon: problem.epsilon,
        max_iter: problem.max_iter,
        true_residual_every: problem.true_residual_every,
    };
    let mut report = pcg(&op, &rhs, precond.as_ref(), &opts)?;
    report.setup_seconds = setup_seconds;
    report.metadata.extend(meta);
    Ok(report)
}

/// `k` distinct indices drawn uniformly without replacement, sorted.
pub fn select_centers_uniform(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(invalid(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = rand::seq::index::sample(&mut rng, n, k).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// `y_j = sum_i beta_i K(x_i, t_j)`, evaluated one test point at a time.
pub fn predict(coefficients: &[f64], train: &Dataset, spec: &KernelSpec, test: &Dataset) -> Result<Vec<f64>> {
    check_len(train.len(), coefficients.len())?;
    check_len(train.dim(), test.dim())?;
    Ok((0..test.len())
        .into_par_iter()
        .map(|j| {
            let t = test.row(j);
            coefficients.iter().enumerate().map(|(i, b)| b * spec.eval_unchecked(train.row(i), t)).sum()
        })
        .collect())
}

/// Symmetric mean absolute percentage error; terms with both values zero
/// count as zero.
pub fn smape(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_len(predicted.len(), actual.len())?;
    if predicted.is_empty() {
        return Err(invalid("SMAPE needs at least one value"));
    }
    let total: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| {
            let denom = (p.abs() + a.abs()) / 2.0;
            if denom == 0.0 {
                0.0
            } else {
                (p - a).abs() / denom
            }
        })
        .sum();
    Ok(total / predicted.len() as f64)
}
