use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use krr_bench::config::{ExperimentConfig, Mode};
use krr_bench::diagnostics::{run_adversarial, verify_theorems, TheoremOptions};
use krr_bench::error::{BenchError, Result};
use krr_bench::{run_batch, run_experiment, BatchOptions};
use krr_precond::diagnostics::EmbeddingMode;
use serde::Serialize;

/// Preconditioned kernel ridge regression experiments.
///
/// Exit codes: 0 success, 1 configuration or I/O error, 2 solver did not
/// converge, 3 numerical breakdown.
#[derive(Debug, Parser)]
#[command(name = "krr-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full-data KRR with a Nystrom preconditioner.
    SolveFull(ExperimentArgs),
    /// Restricted KRR on a subset of centers.
    SolveRestricted(ExperimentArgs),
    /// Runs every config in a directory and aggregates the fraction solved.
    Bench(BenchArgs),
    /// Pivot-rule separation on the adversarial matrices.
    Adversarial(AdversarialArgs),
    /// Monte Carlo checks of the conditioning guarantees.
    VerifyTheorems(TheoremArgs),
}

/// Flags override the matching keys of `--config`.
#[derive(Debug, Args)]
struct ExperimentArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    /// Dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `libsvm` or `csv`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    target_column: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// `gaussian` or `clustered`, instead of a dataset file.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    synthetic_n: Option<usize>,
    #[arg(long)]
    synthetic_dim: Option<usize>,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// `regression_smape` or `classification_sign`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    center_targets: Option<bool>,
    /// `squared_exponential` or `laplace1`.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    mu_over_n: Option<f64>,
    /// `rpcholesky`, `greedy` or `uniform`.
    #[arg(long)]
    pivot: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    /// `krill`, `falkon` or `none`.
    #[arg(long)]
    preconditioner: Option<String>,
    #[arg(long)]
    centers: Option<usize>,
    #[arg(long)]
    embedding_d: Option<usize>,
    #[arg(long)]
    embedding_zeta: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    true_residual_every: Option<usize>,
    /// Bytes available for kernel blocks.
    #[arg(long)]
    memory_budget: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Directory of `*.toml` configs.
    #[arg(long)]
    configs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for configs that do not set one.
    #[arg(long)]
    seed: u64,
    /// Number of configs run concurrently.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Debug, Args)]
struct AdversarialArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    rank: usize,
    /// Off-diagonal scale of the greedy-failure matrix.
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// RPCholesky block size.
    #[arg(long, default_value_t = 1)]
    block: usize,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EmbeddingChoice {
    Theory,
    Practical,
    Identity,
}

#[derive(Debug, Args)]
struct TheoremArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    rpc_n: usize,
    /// Eigenvalue decay ratio of the synthetic spectrum.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, default_value_t = 1e-3)]
    rpc_mu: f64,
    /// Failure probability of the RPCholesky event.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 200)]
    rpc_trials: usize,
    #[arg(long, default_value_t = 2000)]
    krill_n: usize,
    #[arg(long, default_value_t = 50)]
    krill_k: usize,
    #[arg(long, value_enum, default_value_t = EmbeddingChoice::Theory)]
    embedding: EmbeddingChoice,
    /// Failure probability used to size theory-mode embeddings.
    #[arg(long, default_value_t = 0.01)]
    embedding_delta: f64,
    #[arg(long, default_value_t = 100)]
    krill_trials: usize,
    #[arg(long, default_value_t = 0.05)]
    slack: f64,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn int(v: impl TryInto<i64>) -> Result<toml::Value> {
    v.try_into()
        .map(toml::Value::Integer)
        .map_err(|_| BenchError::Config("integer flag does not fit in a TOML integer".into()))
}

impl ExperimentArgs {
    fn into_config(self, mode: Mode) -> Result<ExperimentConfig> {
        let (mut table, base) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| BenchError::Config(format!("{}: {e}", path.display())))?;
                (table, path.parent().map(Path::to_path_buf))
            }
            None => (toml::Table::new(), None),
        };
        let mode_name = match mode {
            Mode::Full => "full",
            Mode::Restricted => "restricted",
        };
        if let Some(existing) = table.get("mode").and_then(toml::Value::as_str) {
            if existing != mode_name {
                return Err(BenchError::Config(format!("config is for {existing} mode, not {mode_name}")));
            }
        }
        table.insert("mode".into(), toml::Value::String(mode_name.into()));
        table.insert("seed".into(), int(self.seed)?);

        let strings = [
            ("name", self.name),
            ("format", self.format),
            ("target_column", self.target_column),
            ("synthetic", self.synthetic),
            ("task", self.task),
            ("kernel", self.kernel),
            ("pivot", self.pivot),
            ("preconditioner", self.preconditioner),
        ];
        for (key, v) in strings {
            if let Some(v) = v {
                table.insert(key.into(), toml::Value::String(v));
            }
        }
        // Flag paths are relative to the working directory, not the config.
        let cwd = std::env::current_dir().map_err(|e| BenchError::io(".", e))?;
        for (key, v) in [("dataset", self.dataset), ("output_dir", self.output_dir)] {
            if let Some(v) = v {
                table.insert(key.into(), toml::Value::String(cwd.join(v).to_string_lossy().into_owned()));
            }
        }
        let counts = [
            ("feature_dim", self.feature_dim),
            ("synthetic_n", self.synthetic_n),
            ("synthetic_dim", self.synthetic_dim),
            ("subsample", self.subsample),
            ("block_size", self.block_size),
            ("rank", self.rank),
            ("centers", self.centers),
            ("embedding_d", self.embedding_d),
            ("embedding_zeta", self.embedding_zeta),
            ("max_iter", self.max_iter),
            ("true_residual_every", self.true_residual_every),
            ("memory_budget", self.memory_budget),
        ];
        for (key, v) in counts {
            if let Some(v) = v {
                table.insert(key.into(), int(v)?);
            }
        }
        let reals = [
            ("test_fraction", self.test_fraction),
            ("bandwidth", self.bandwidth),
            ("mu_over_n", self.mu_over_n),
            ("epsilon", self.epsilon),
        ];
        for (key, v) in reals {
            if let Some(v) = v {
                table.insert(key.into(), toml::Value::Float(v));
            }
        }
        if let Some(v) = self.center_targets {
            table.insert("center_targets".into(), toml::Value::Boolean(v));
        }
        ExperimentConfig::from_table(table, base.as_deref())
    }
}

fn emit_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| BenchError::Config(e.to_string()))? + "\n";
    match out {
        Some(path) => std::fs::write(path, json).map_err(|e| BenchError::io(path, e)),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::SolveFull(args) => solve(args, Mode::Full),
        Command::SolveRestricted(args) => solve(args, Mode::Restricted),
        Command::Bench(args) => {
            let opts =
                BatchOptions { configs: args.configs, output_dir: args.out, seed: args.seed, workers: args.workers };
            let report = run_batch(&opts)?;
            for e in &report.entries {
                match &e.error {
                    Some(err) => eprintln!("{}: failed (exit {}): {err}", e.name, e.exit_code),
                    None => match e.iterations_to_epsilon {
                        Some(i) => eprintln!("{}: solved in {i} iterations", e.name),
                        None => eprintln!("{}: not solved in {} iterations", e.name, e.max_iter),
                    },
                }
            }
            let solved = report.fraction_solved.last().map_or(0.0, |f| f.1);
            eprintln!("fraction solved: {solved}; results in {}", opts.output_dir.display());
            Ok(report.exit_code())
        }
        Command::Adversarial(a) => {
            let report = run_adversarial(a.n, a.rank, a.delta, a.trials, a.block, a.seed)?;
            emit_json(&report, a.out.as_deref())?;
            Ok(0)
        }
        Command::VerifyTheorems(a) => {
            let embedding = match a.embedding {
                EmbeddingChoice::Theory => EmbeddingMode::Theory { delta: a.embedding_delta },
                EmbeddingChoice::Practical => EmbeddingMode::Practical,
                EmbeddingChoice::Identity => EmbeddingMode::Identity,
            };
            let opts = TheoremOptions {
                seed: a.seed,
                rpc_n: a.rpc_n,
                ratio: a.ratio,
                rpc_mu: a.rpc_mu,
                delta: a.delta,
                rpc_trials: a.rpc_trials,
                krill_n: a.krill_n,
                krill_k: a.krill_k,
                embedding,
                krill_trials: a.krill_trials,
                slack: a.slack,
            };
            let report = verify_theorems(&opts)?;
            emit_json(&report, a.out.as_deref())?;
            eprintln!(
                "rpcholesky event fraction {} ({}), krill event fraction {} ({})",
                report.rpc.event_fraction,
                if report.rpc_holds { "holds" } else { "fails" },
                report.krill.event_fraction,
                if report.krill_holds { "holds" } else { "fails" },
            );
            Ok(0)
        }
    }
}

fn solve(args: ExperimentArgs, mode: Mode) -> Result<i32> {
    let cfg = args.into_config(mode)?;
    let outcome = run_experiment(&cfg)?;
    let s = &outcome.summary;
    match &s.error {
        Some(err) => eprintln!("{}: solver failed: {err}", s.name),
        None => eprintln!(
            "{}: {} after {} iterations, relative residual {:e}{}",
            s.name,
            if s.converged { "converged" } else { "not converged" },
            s.iterations,
            s.final_residual.unwrap_or(f64::NAN),
            s.test_error.map(|e| format!(", test error {e}")).unwrap_or_default(),
        ),
    }
    eprintln!("results in {}", cfg.output_dir.display());
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
