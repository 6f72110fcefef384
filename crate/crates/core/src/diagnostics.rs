//! Adversarial test matrices for the pivot rules and Monte Carlo checks of
//! the conditioning guarantees for RPCholesky and KRILL preconditioning.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernel::{DataKernel, ExplicitKernel, KernelOracle, KernelSpec};
use crate::krr::{center_block, select_centers_uniform};
use crate::linalg::{orthonormal_basis, symmetric_eigenvalues};
use crate::lowrank::{build_factor, sufficient_rank, tail_rank, PivotRule};
use crate::precond::{build_krill, build_rpc_preconditioner, precond_condition_number};
use crate::sketch::{distortion_check, EmbeddingParams, SparseSignEmbedding};
use crate::synthetic::{gaussian_dataset, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversarialKind {
    UniformFailure,
    GreedyFailure { delta: f64 },
}

/// An explicit psd matrix with block structure that defeats one pivot rule.
#[derive(Debug, Clone)]
pub struct AdversarialMatrix {
    pub kernel: ExplicitKernel,
    pub kind: AdversarialKind,
    /// Size of the large (left) and small (right) diagonal blocks.
    pub blocks: (usize, usize),
    /// Exact eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// `ceil(n^(p/3))` that is exact when `n` is a perfect cube.
fn cube_root_block(n: usize, p: i32) -> usize {
    let x = (n as f64).cbrt().powi(p);
    (x - 1e-9).ceil().max(1.0) as usize
}

/// `blockdiag(1 1*, 1 1*)` with blocks of sizes `N - ceil(N^(1/3))` and
/// `ceil(N^(1/3))`. Uniform pivoting rarely samples the small block.
pub fn build_uniform_failure_matrix(n: usize) -> Result<AdversarialMatrix> {
    if n < 8 {
        return Err(invalid(format!("adversarial matrices need N >= 8, got {n}")));
    }
    let m = cube_root_block(n, 1);
    let left = n - m;
    let a = DMatrix::from_fn(n, n, |i, j| if (i < left) == (j < left) { 1.0 } else { 0.0 });
    let mut eigenvalues = vec![left as f64, m as f64];
    eigenvalues.resize(n, 0.0);
    eigenvalues.sort_by(|x, y| y.total_cmp(x));
    Ok(AdversarialMatrix {
        kernel: ExplicitKernel::new(a)?,
        kind: AdversarialKind::UniformFailure,
        blocks: (left, m),
        eigenvalues,
    })
}

/// `1 1* + blockdiag((delta/2) 1 1*, delta I)` with blocks of sizes
/// `N - ceil(N^(2/3))` and `ceil(N^(2/3))`. The identity block has the
/// largest diagonal, so greedy pivoting exhausts it first.
pub fn build_greedy_failure_matrix(n: usize, delta: f64) -> Result<AdversarialMatrix> {
    if n < 8 {
        return Err(invalid(format!("adversarial matrices need N >= 8, got {n}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let m = cube_root_block(n, 2);
    let left = n - m;
    let a = DMatrix::from_fn(n, n, |i, j| {
        let block = match (i < left, j < left) {
            (true, true) => delta / 2.0,
            (false, false) if i == j => delta,
            _ => 0.0,
        };
        1.0 + block
    });
    // Eigenvectors are constant on each block or orthogonal to the constants
    // within a block. The constant ones reduce to a 2 x 2 problem.
    let (l, mf) = (left as f64, m as f64);
    let (p, q, r) = (l * (1.0 + delta / 2.0), (l * mf).sqrt(), mf + delta);
    let mid = 0.5 * (p + r);
    let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
    let mut eigenvalues = vec![mid + rad, mid - rad];
    eigenvalues.extend(std::iter::repeat_n(delta, m - 1));
    eigenvalues.extend(std::iter::repeat_n(0.0, left - 1));
    eigenvalues.sort_by(|x, y| y.total_cmp(x));
    Ok(AdversarialMatrix {
        kernel: ExplicitKernel::new(a)?,
        kind: AdversarialKind::GreedyFailure { delta },
        blocks: (left, m),
        eigenvalues,
    })
}

/// Trace residual `tr(A - F F*)` for each seed of a pivot rule.
pub fn trace_residuals(oracle: &dyn KernelOracle, r: usize, rules: &[PivotRule]) -> Result<Vec<f64>> {
    rules
        .par_iter()
        .map(|&rule| build_factor(oracle, r, rule).map(|f| crate::lowrank::trace_residual(oracle, &f)))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Setup for the RPCholesky conditioning check on a fixed matrix
/// `A = Q diag(spectrum) Q*`; only the pivot seeds vary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpcTheoremConfig {
    pub n: usize,
    pub spectrum: Spectrum,
    pub mu: f64,
    /// Failure probability; the event is `kappa <= 3 / delta`.
    pub delta: f64,
    pub seeds: Vec<u64>,
    pub matrix_seed: u64,
    pub block: usize,
    /// Overrides the sufficient rank when set.
    pub rank: Option<usize>,
}

impl RpcTheoremConfig {
    pub fn new(n: usize, spectrum: Spectrum, mu: f64) -> Self {
        Self { n, spectrum, mu, delta: 0.1, seeds: (0..200).collect(), matrix_seed: 0, block: 1, rank: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpcTrial {
    pub seed: u64,
    pub kappa: f64,
    pub trace_residual: f64,
    /// Deterministic bound `1 + tr(A - F F*) / mu`.
    pub kappa_bound: f64,
    pub event: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpcTheoremReport {
    pub tail_rank: usize,
    pub rank: usize,
    /// `sum_{i > tail_rank} lambda_i`.
    pub tail_sum: f64,
    pub kappa_threshold: f64,
    pub event_fraction: f64,
    pub mean_trace_residual: f64,
    pub trials: Vec<RpcTrial>,
}

pub fn verify_rpc_theorem(config: &RpcTheoremConfig) -> Result<RpcTheoremReport> {
    if config.seeds.is_empty() {
        return Err(invalid("no seeds"));
    }
    let eigs = config.spectrum.values(config.n);
    let mut sorted = eigs.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let a = ExplicitKernel::new(config.spectrum.matrix(config.n, config.matrix_seed))?;
    let mu = config.mu;
    let trace = a.trace();
    let t_rank = tail_rank(&sorted, mu)?;
    let tail_sum: f64 = sorted[t_rank..].iter().rev().sum();
    let rank = config.rank.unwrap_or_else(|| sufficient_rank(t_rank, trace, mu, config.n)).clamp(1, config.n);
    let m = a.matrix() + DMatrix::identity(config.n, config.n) * mu;
    let threshold = 3.0 / config.delta;
    let trials: Vec<RpcTrial> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let rule = PivotRule::RpCholesky { block: config.block, seed };
            let f = build_factor(&a, rank, rule)?;
            let residual = crate::lowrank::trace_residual(&a, &f);
            let p = build_rpc_preconditioner(&f, mu)?;
            let kappa = precond_condition_number(&m, &p)?;
            Ok(RpcTrial {
                seed,
                kappa,
                trace_residual: residual,
                kappa_bound: 1.0 + residual / mu,
                event: kappa <= threshold,
            })
        })
        .collect::<Result<_>>()?;
    let count = trials.len() as f64;
    Ok(RpcTheoremReport {
        tail_rank: t_rank,
        rank,
        tail_sum,
        kappa_threshold: threshold,
        event_fraction: trials.iter().filter(|t| t.event).count() as f64 / count,
        mean_trace_residual: trials.iter().map(|t| t.trace_residual).sum::<f64>() / count,
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Subspace-embedding scalings with target failure probability `delta`.
    Theory { delta: f64 },
    /// `d = 2k`, `zeta = min(8, 2k)`.
    Practical,
    /// The exact identity map.
    Identity,
}

/// Setup for the KRILL conditioning check: a squared-exponential kernel on
/// `n` Gaussian points with `k` uniform centers, fixed across seeds; only
/// the embedding varies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrillTheoremConfig {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub bandwidth: f64,
    pub mu: f64,
    pub embedding: EmbeddingMode,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
}

impl KrillTheoremConfig {
    pub fn new(n: usize, k: usize, embedding: EmbeddingMode) -> Self {
        Self { n, k, dim: 8, bandwidth: 3.0, mu: 1e-3 * n as f64, embedding, seeds: (0..100).collect(), data_seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrillTrial {
    pub seed: u64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Distortion within `[1/2, 3/2]`.
    pub event: bool,
    pub kappa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrillTheoremReport {
    pub embedding: EmbeddingParams,
    pub event_fraction: f64,
    /// `kappa <= 3 + 1e-6` on every seed where the distortion event holds.
    pub conditional_holds: bool,
    pub max_kappa_given_event: Option<f64>,
    pub trials: Vec<KrillTrial>,
}

pub fn verify_krill_theorem(config: &KrillTheoremConfig) -> Result<KrillTheoremReport> {
    if config.seeds.is_empty() {
        return Err(invalid("no seeds"));
    }
    let data = gaussian_dataset(config.n, config.dim, config.data_seed);
    let oracle = DataKernel::new(data, KernelSpec::squared_exponential(config.bandwidth)?);
    let centers = select_centers_uniform(config.n, config.k, config.data_seed)?;
    let cols = oracle.columns(&centers)?;
    let a_ss = center_block(&oracle, &centers);
    let m = cols.tr_mul(&cols) + &a_ss * config.mu;
    let basis = orthonormal_basis(&cols);
    let params = match config.embedding {
        EmbeddingMode::Theory { delta } => EmbeddingParams::theory(config.k, delta),
        EmbeddingMode::Practical => EmbeddingParams::practical(config.k),
        EmbeddingMode::Identity => EmbeddingParams { d: config.n, zeta: 1 },
    };
    let trials: Vec<KrillTrial> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let phi = match config.embedding {
                EmbeddingMode::Identity => SparseSignEmbedding::identity(config.n),
                _ => SparseSignEmbedding::with_params(params, config.n, seed)?,
            };
            let (lo, hi) = distortion_check(&phi, &basis)?;
            let p = build_krill(&cols, &phi, &a_ss, config.mu)?;
            let kappa = precond_condition_number(&m, &p)?;
            Ok(KrillTrial { seed, min_ratio: lo, max_ratio: hi, event: lo >= 0.5 && hi <= 1.5, kappa })
        })
        .collect::<Result<_>>()?;
    let qualifying: Vec<f64> = trials.iter().filter(|t| t.event).map(|t| t.kappa).collect();
    let max_kappa = qualifying.iter().copied().reduce(f64::max);
    Ok(KrillTheoremReport {
        embedding: params,
        event_fraction: qualifying.len() as f64 / trials.len() as f64,
        conditional_holds: qualifying.iter().all(|&k| k <= 3.0 + 1e-6),
        max_kappa_given_event: max_kappa,
        trials,
    })
}

/// Condition number of the full-data system `A + mu I` preconditioned with
/// a factor from `rule`, together with the deterministic bound.
pub fn nystrom_condition(a: &ExplicitKernel, r: usize, rule: PivotRule, mu: f64) -> Result<(f64, f64, f64)> {
    let f = build_factor(a, r, rule)?;
    let p = build_rpc_preconditioner(&f, mu)?;
    let n = a.size();
    let m = a.matrix() + DMatrix::identity(n, n) * mu;
    let (lo, hi) = crate::precond::preconditioned_extremes(&m, &p)?;
    let bound = 1.0 + crate::lowrank::trace_residual(a, &f) / mu;
    Ok((lo, hi / lo, bound))
}

/// Eigenvalues of an explicit matrix, descending, clamped at zero.
pub fn descending_spectrum(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut eigs = symmetric_eigenvalues(a)?;
    eigs.reverse();
    for e in &mut eigs {
        *e = e.max(0.0);
    }
    Ok(eigs)
}
