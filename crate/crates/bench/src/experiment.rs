//! Single-experiment pipeline: load, subsample, split, standardize, solve,
//! evaluate and write `residuals.csv` plus `summary.json`.

use std::fmt::Write as _;
use std::path::Path;

use krr_precond::data_io::{read_csv, read_libsvm};
use krr_precond::synthetic::{clustered_dataset, gaussian_dataset, ClusterDesign};
use krr_precond::{
    predict, select_centers_uniform, smape, solve_full_krr, solve_restricted_krr, DataKernel, Dataset, ExplicitKernel,
    FullKrrProblem, KernelOracle, PivotRule, RestrictedKrrProblem, SolveReport, Standardizer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, FileFormat, Mode, Pivot, Solver, SyntheticKind, Task};
use crate::error::{config_error, BenchError, Result};

/// Independent random streams derived from the experiment seed.
#[derive(Debug, Clone, Copy)]
enum Stage {
    Data = 0,
    Subsample = 1,
    Split = 2,
    Pivots = 3,
    Centers = 4,
    Embedding = 5,
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng.random()
}

pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::File { path, format, target_column, feature_dim } => {
            let read = match format {
                FileFormat::Libsvm => read_libsvm(path, *feature_dim),
                FileFormat::Csv => read_csv(path, target_column.as_deref().unwrap_or_default()),
            };
            read.map_err(|e| match e {
                krr_precond::Error::Io(io) => BenchError::io(path, io),
                other => other.into(),
            })
        }
        DataSource::Synthetic { kind, n, dim } => {
            let seed = stage_seed(seed, Stage::Data);
            Ok(match kind {
                SyntheticKind::Gaussian => gaussian_dataset(*n, *dim, seed),
                SyntheticKind::Clustered => clustered_dataset(&ClusterDesign::new(*n, *dim), seed),
            })
        }
    }
}

/// Keeps `size` uniformly chosen rows, in their original order. Datasets
/// with at most `size` rows are returned unchanged.
pub fn subsample(data: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size >= data.len() {
        return Ok(data.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, data.len(), size).into_vec();
    keep.sort_unstable();
    Ok(data.subset(&keep)?)
}

/// Splits off `round(test_fraction * N)` uniformly chosen rows as the test
/// set. Both parts keep the original row order.
pub fn split_train_test(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(config_error(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(config_error(format!(
            "test fraction {test_fraction} of {n} rows leaves an empty train or test set"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, n_test) {
        is_test[i] = true;
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_test[i]);
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// Maps two-valued labels to `-1` (smaller) and `+1` (larger). Labels that
/// are already all `-1` or all `+1` pass through.
pub fn encode_sign_labels(labels: &[f64]) -> Result<Vec<f64>> {
    let mut distinct: Vec<f64> = labels.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    match distinct.as_slice() {
        [lo, _] => Ok(labels.iter().map(|&y| if y == *lo { -1.0 } else { 1.0 }).collect()),
        [v] if *v == 1.0 || *v == -1.0 => Ok(labels.to_vec()),
        _ => Err(config_error(format!("classification needs two distinct labels, found {}", distinct.len()))),
    }
}

/// SMAPE for regression; for classification the fraction of points whose
/// prediction sign disagrees with a `+-1` label (a zero prediction counts
/// as wrong).
pub fn test_error(predictions: &[f64], labels: &[f64], task: Task) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(config_error(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    match task {
        Task::RegressionSmape => Ok(smape(predictions, labels)?),
        Task::ClassificationSign => {
            if labels.is_empty() {
                return Err(config_error("no labels to score"));
            }
            if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
                return Err(config_error(format!("classification label {bad} is not -1 or +1")));
            }
            let wrong = predictions.iter().zip(labels).filter(|(p, y)| **p * **y <= 0.0).count();
            Ok(wrong as f64 / labels.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub mu: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub converged: bool,
    pub iterations: usize,
    pub iterations_to_epsilon: Option<usize>,
    pub final_residual: Option<f64>,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
    pub wall_seconds: f64,
    pub task: Task,
    pub test_error: Option<f64>,
    pub true_residuals: Vec<(usize, f64)>,
    pub solver: serde_json::Map<String, serde_json::Value>,
    pub error: Option<String>,
    pub exit_code: i32,
    pub config: ExperimentConfig,
}

/// Result of [`run_experiment`]; the residual history is also on disk.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Summary,
    pub residual_history: Vec<f64>,
    pub solution: Vec<f64>,
}

impl Outcome {
    /// 0 when converged, 2 when the iteration budget ran out, 1 or 3 when
    /// the solver failed.
    pub fn exit_code(&self) -> i32 {
        self.summary.exit_code
    }
}

struct Prepared {
    train: Dataset,
    test: Option<Dataset>,
    y: Vec<f64>,
    y_offset: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let mut data = load_dataset(&cfg.data, cfg.seed)?;
    if let Some(size) = cfg.subsample {
        data = subsample(&data, size, stage_seed(cfg.seed, Stage::Subsample))?;
    }
    let targets = data.targets().ok_or_else(|| config_error("dataset has no targets"))?.to_vec();
    if cfg.task == Task::ClassificationSign {
        data = data.with_targets(encode_sign_labels(&targets)?)?;
    }
    let (train, test) = match cfg.test_fraction {
        Some(f) => {
            let (train, test) = split_train_test(&data, f, stage_seed(cfg.seed, Stage::Split))?;
            (train, Some(test))
        }
        None => (data, None),
    };
    if train.len() < 2 {
        return Err(config_error("need at least two training rows"));
    }
    let scaler = Standardizer::fit(&train);
    let train = scaler.transform(&train)?;
    let test = test.map(|t| scaler.transform(&t)).transpose()?;
    let mut y = train.targets().unwrap_or_default().to_vec();
    let y_offset = if cfg.center_targets { y.iter().sum::<f64>() / y.len() as f64 } else { 0.0 };
    y.iter_mut().for_each(|v| *v -= y_offset);
    Ok(Prepared { train, test, y, y_offset })
}

/// Solves and returns the report together with the rows that carry the
/// coefficients (all training rows, or the centers).
fn solve(cfg: &ExperimentConfig, prep: &Prepared, mu: f64) -> Result<(SolveReport, Option<Vec<usize>>)> {
    let data_kernel = DataKernel::new(prep.train.clone(), cfg.kernel);
    match &cfg.solver {
        Solver::Full { pivot, rank, block_size } => {
            let explicit: Option<ExplicitKernel> =
                (data_kernel.dense_bytes() <= cfg.memory_budget).then(|| data_kernel.materialize());
            let oracle: &dyn KernelOracle = match &explicit {
                Some(e) => e,
                None => &data_kernel,
            };
            let seed = stage_seed(cfg.seed, Stage::Pivots);
            let rule = match pivot {
                Pivot::Rpcholesky => PivotRule::RpCholesky { block: *block_size, seed },
                Pivot::Greedy => PivotRule::Greedy,
                Pivot::Uniform => PivotRule::Uniform { seed },
            };
            let mut p = FullKrrProblem::new(oracle, &prep.y, mu, (*rank).min(prep.train.len()));
            p.pivot_rule = Some(rule);
            p.epsilon = cfg.epsilon;
            p.max_iter = cfg.max_iter;
            p.true_residual_every = cfg.true_residual_every;
            Ok((solve_full_krr(&p)?, None))
        }
        Solver::Restricted { preconditioner, centers, embedding } => {
            let k = *centers;
            if k > prep.train.len() {
                return Err(config_error(format!("{k} centers requested from {} training rows", prep.train.len())));
            }
            let centers = select_centers_uniform(prep.train.len(), k, stage_seed(cfg.seed, Stage::Centers))?;
            let mut p = RestrictedKrrProblem::new(&data_kernel, &centers, &prep.y, mu);
            if let Some(e) = embedding {
                p.embedding = *e;
            }
            p.embedding_seed = stage_seed(cfg.seed, Stage::Embedding);
            p.preconditioner = (*preconditioner).into();
            p.epsilon = cfg.epsilon;
            p.max_iter = cfg.max_iter;
            p.memory_budget = cfg.memory_budget;
            p.true_residual_every = cfg.true_residual_every;
            let report = solve_restricted_krr(&p)?;
            Ok((report, Some(centers)))
        }
    }
}

pub fn residuals_csv(history: &[f64]) -> String {
    let mut out = String::from("iteration,relative_residual\n");
    for (t, r) in history.iter().enumerate() {
        let _ = writeln!(out, "{t},{r:e}");
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| BenchError::io(path, e))
}

/// Runs one experiment and writes its artifacts to `cfg.output_dir`.
/// Data and configuration problems are returned as errors; solver failures
/// are recorded in the summary with a nonzero exit code.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let n = prep.train.len();
    let mu = cfg.mu_over_n * n as f64;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| BenchError::io(&cfg.output_dir, e))?;

    let mut summary = Summary {
        name: cfg.name.clone(),
        mode: cfg.mode(),
        seed: cfg.seed,
        n_train: n,
        n_test: prep.test.as_ref().map_or(0, Dataset::len),
        dim: prep.train.dim(),
        mu,
        epsilon: cfg.epsilon,
        max_iter: cfg.max_iter,
        converged: false,
        iterations: 0,
        iterations_to_epsilon: None,
        final_residual: None,
        setup_seconds: 0.0,
        solve_seconds: 0.0,
        wall_seconds: 0.0,
        task: cfg.task,
        test_error: None,
        true_residuals: Vec::new(),
        solver: serde_json::Map::new(),
        error: None,
        exit_code: 0,
        config: cfg.clone(),
    };

    let (history, solution) = match solve(cfg, &prep, mu) {
        Ok((report, rows)) => {
            summary.converged = report.converged;
            summary.iterations = report.iterations;
            summary.iterations_to_epsilon = report.iterations_to(cfg.epsilon);
            summary.final_residual = Some(report.final_residual());
            summary.setup_seconds = report.setup_seconds;
            summary.solve_seconds = report.solve_seconds;
            summary.wall_seconds = report.wall_seconds();
            summary.true_residuals = report.true_residuals.clone();
            summary.solver = report.metadata.clone().into_iter().collect();
            summary.exit_code = if report.converged { 0 } else { 2 };
            if let Some(test) = &prep.test {
                let expansion = match &rows {
                    Some(centers) => prep.train.subset(centers)?,
                    None => prep.train.clone(),
                };
                let mut pred = predict(&report.solution, &expansion, &cfg.kernel, test)?;
                pred.iter_mut().for_each(|p| *p += prep.y_offset);
                summary.test_error = Some(test_error(&pred, test.targets().unwrap_or_default(), cfg.task)?);
            }
            (report.residual_history, report.solution)
        }
        Err(BenchError::Core(e)) => {
            let err = BenchError::Core(e);
            summary.exit_code = err.exit_code();
            summary.error = Some(err.to_string());
            (Vec::new(), Vec::new())
        }
        Err(other) => return Err(other),
    };

    write_file(&cfg.output_dir.join("residuals.csv"), &residuals_csv(&history))?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| config_error(e.to_string()))?;
    write_file(&cfg.output_dir.join("summary.json"), &(json + "\n"))?;
    Ok(Outcome { summary, residual_history: history, solution })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ() {
        let a = stage_seed(7, Stage::Pivots);
        assert_ne!(a, stage_seed(7, Stage::Centers));
        assert_ne!(a, stage_seed(8, Stage::Pivots));
        assert_eq!(a, stage_seed(7, Stage::Pivots));
    }

    #[test]
    fn sign_label_encoding() {
        assert_eq!(encode_sign_labels(&[0.0, 1.0, 0.0]).unwrap(), vec![-1.0, 1.0, -1.0]);
        assert_eq!(encode_sign_labels(&[2.0, 4.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(encode_sign_labels(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert!(encode_sign_labels(&[0.0, 1.0, 2.0]).is_err());
        assert!(encode_sign_labels(&[3.0]).is_err());
    }

    #[test]
    fn residual_csv_format() {
        assert_eq!(residuals_csv(&[1.0, 0.25]), "iteration,relative_residual\n0,1e0\n1,2.5e-1\n");
    }
}
