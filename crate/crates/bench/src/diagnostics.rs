//! Reports for the `adversarial` and `verify-theorems` commands.

use krr_precond::diagnostics::{
    build_greedy_failure_matrix, build_uniform_failure_matrix, median, trace_residuals, verify_krill_theorem,
    verify_rpc_theorem, EmbeddingMode, KrillTheoremConfig, KrillTheoremReport, RpcTheoremConfig, RpcTheoremReport,
};
use krr_precond::synthetic::Spectrum;
use krr_precond::PivotRule;
use serde::Serialize;

use crate::error::{config_error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct PairedResiduals {
    /// Sizes of the large and small diagonal blocks.
    pub blocks: (usize, usize),
    pub rpcholesky: Vec<f64>,
    pub baseline: Vec<f64>,
    pub median_rpcholesky: f64,
    pub median_baseline: f64,
    pub rpcholesky_wins: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdversarialReport {
    pub n: usize,
    pub rank: usize,
    pub block: usize,
    pub delta: f64,
    pub seeds: Vec<u64>,
    /// RPCholesky against uniform pivoting on the uniform-failure matrix.
    pub uniform_failure: PairedResiduals,
    /// RPCholesky against greedy pivoting on the greedy-failure matrix.
    pub greedy_failure: PairedResiduals,
}

fn seeds(start: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| start.wrapping_add(i)).collect()
}

pub fn run_adversarial(
    n: usize,
    rank: usize,
    delta: f64,
    trials: usize,
    block: usize,
    seed: u64,
) -> Result<AdversarialReport> {
    if trials == 0 || rank == 0 || block == 0 {
        return Err(config_error("trials, rank and block must be positive"));
    }
    let seeds = seeds(seed, trials);
    let rpc: Vec<PivotRule> = seeds.iter().map(|&s| PivotRule::RpCholesky { block, seed: s }).collect();

    let uniform = build_uniform_failure_matrix(n)?;
    let rules: Vec<PivotRule> = seeds.iter().map(|&s| PivotRule::Uniform { seed: s }).collect();
    let a = trace_residuals(&uniform.kernel, rank, &rpc)?;
    let b = trace_residuals(&uniform.kernel, rank, &rules)?;
    let uniform_failure = paired(uniform.blocks, a, b);

    let greedy = build_greedy_failure_matrix(n, delta)?;
    let a = trace_residuals(&greedy.kernel, rank, &rpc)?;
    let b = trace_residuals(&greedy.kernel, rank, &[PivotRule::Greedy])?;
    let greedy_failure = paired(greedy.blocks, a, b);

    Ok(AdversarialReport { n, rank, block, delta, seeds, uniform_failure, greedy_failure })
}

fn paired(blocks: (usize, usize), rpcholesky: Vec<f64>, baseline: Vec<f64>) -> PairedResiduals {
    let median_rpcholesky = median(&rpcholesky);
    let median_baseline = median(&baseline);
    PairedResiduals {
        blocks,
        rpcholesky,
        baseline,
        median_rpcholesky,
        median_baseline,
        rpcholesky_wins: median_rpcholesky < median_baseline,
    }
}

#[derive(Debug, Clone)]
pub struct TheoremOptions {
    pub seed: u64,
    pub rpc_n: usize,
    pub ratio: f64,
    pub rpc_mu: f64,
    pub delta: f64,
    pub rpc_trials: usize,
    pub krill_n: usize,
    pub krill_k: usize,
    pub embedding: EmbeddingMode,
    pub krill_trials: usize,
    /// Allowed shortfall of an observed event frequency below its guaranteed probability.
    pub slack: f64,
}

impl Default for TheoremOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            rpc_n: 200,
            ratio: 0.5,
            rpc_mu: 1e-3,
            delta: 0.1,
            rpc_trials: 200,
            krill_n: 2000,
            krill_k: 50,
            embedding: EmbeddingMode::Theory { delta: 0.01 },
            krill_trials: 100,
            slack: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub rpc_config: RpcTheoremConfig,
    pub rpc: RpcTheoremReport,
    /// Event frequency at least `1 - delta - slack`.
    pub rpc_holds: bool,
    pub krill_config: KrillTheoremConfig,
    pub krill: KrillTheoremReport,
    /// The conditional bound held on every seed with an accurate embedding,
    /// and, for theory-mode embeddings, the embedding was accurate on at
    /// least `1 - delta - slack` of the seeds.
    pub krill_holds: bool,
    pub slack: f64,
}

impl TheoremReport {
    pub fn all_hold(&self) -> bool {
        self.rpc_holds && self.krill_holds
    }
}

pub fn verify_theorems(opts: &TheoremOptions) -> Result<TheoremReport> {
    if opts.rpc_trials == 0 || opts.krill_trials == 0 {
        return Err(config_error("trial counts must be positive"));
    }
    if opts.slack.is_nan() || opts.slack < 0.0 {
        return Err(config_error("slack must be nonnegative"));
    }
    let mut rpc_config = RpcTheoremConfig::new(opts.rpc_n, Spectrum::Geometric { ratio: opts.ratio }, opts.rpc_mu);
    rpc_config.delta = opts.delta;
    rpc_config.seeds = seeds(opts.seed, opts.rpc_trials);
    rpc_config.matrix_seed = opts.seed;
    let rpc = verify_rpc_theorem(&rpc_config)?;
    let rpc_holds = rpc.event_fraction >= 1.0 - opts.delta - opts.slack;

    let mut krill_config = KrillTheoremConfig::new(opts.krill_n, opts.krill_k, opts.embedding);
    krill_config.seeds = seeds(opts.seed, opts.krill_trials);
    krill_config.data_seed = opts.seed;
    let krill = verify_krill_theorem(&krill_config)?;
    let frequency_ok = match opts.embedding {
        EmbeddingMode::Theory { delta } => krill.event_fraction >= 1.0 - delta - opts.slack,
        EmbeddingMode::Practical | EmbeddingMode::Identity => true,
    };
    let krill_holds = krill.conditional_holds && frequency_ok;

    Ok(TheoremReport { rpc_config, rpc, rpc_holds, krill_config, krill, krill_holds, slack: opts.slack })
}
