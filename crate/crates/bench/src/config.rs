//! Experiment configuration: a flat TOML table whose keys are listed in
//! [`ConfigFile`]. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use krr_precond::sketch::EmbeddingParams;
use krr_precond::{KernelFamily, KernelSpec, RestrictedPreconditioner};
use serde::{Deserialize, Serialize};

use crate::error::{config_error, BenchError, Result};

pub const DEFAULT_MEMORY_BUDGET: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pivot {
    Rpcholesky,
    Greedy,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerChoice {
    Krill,
    Falkon,
    None,
}

impl From<PreconditionerChoice> for RestrictedPreconditioner {
    fn from(p: PreconditionerChoice) -> Self {
        match p {
            PreconditionerChoice::Krill => RestrictedPreconditioner::Krill,
            PreconditionerChoice::Falkon => RestrictedPreconditioner::Falkon,
            PreconditionerChoice::None => RestrictedPreconditioner::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    RegressionSmape,
    ClassificationSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Gaussian features with targets `sin(sum x) + noise`.
    Gaussian,
    /// Gaussian bulk plus a satellite cluster and outliers.
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Libsvm,
    Csv,
}

/// The on-disk schema. Every key is optional here; [`ExperimentConfig::from_file`]
/// applies defaults and checks that the mode-specific keys are present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: Option<String>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,

    pub dataset: Option<PathBuf>,
    pub format: Option<FileFormat>,
    pub target_column: Option<String>,
    pub feature_dim: Option<usize>,
    pub synthetic: Option<SyntheticKind>,
    pub synthetic_n: Option<usize>,
    pub synthetic_dim: Option<usize>,
    pub subsample: Option<usize>,
    pub test_fraction: Option<f64>,
    pub task: Option<Task>,
    pub center_targets: Option<bool>,

    pub kernel: Option<KernelFamily>,
    pub bandwidth: Option<f64>,
    pub mu_over_n: Option<f64>,

    pub pivot: Option<Pivot>,
    pub block_size: Option<usize>,
    pub rank: Option<usize>,

    pub preconditioner: Option<PreconditionerChoice>,
    pub centers: Option<usize>,
    pub embedding_d: Option<usize>,
    pub embedding_zeta: Option<usize>,

    pub epsilon: Option<f64>,
    pub max_iter: Option<usize>,
    pub true_residual_every: Option<usize>,
    pub memory_budget: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    File { path: PathBuf, format: FileFormat, target_column: Option<String>, feature_dim: Option<usize> },
    Synthetic { kind: SyntheticKind, n: usize, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Solver {
    Full { pivot: Pivot, rank: usize, block_size: usize },
    Restricted { preconditioner: PreconditionerChoice, centers: usize, embedding: Option<EmbeddingParams> },
}

/// A validated experiment with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    pub subsample: Option<usize>,
    pub test_fraction: Option<f64>,
    pub task: Task,
    pub center_targets: bool,
    pub kernel: KernelSpec,
    pub mu_over_n: f64,
    pub solver: Solver,
    pub epsilon: f64,
    pub max_iter: usize,
    pub true_residual_every: Option<usize>,
    pub memory_budget: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn mode(&self) -> Mode {
        match self.solver {
            Solver::Full { .. } => Mode::Full,
            Solver::Restricted { .. } => Mode::Restricted,
        }
    }

    /// Parses and validates a TOML document. Relative dataset paths are
    /// resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        Self::from_table(table, base)
    }

    pub fn from_table(table: toml::Table, base: Option<&Path>) -> Result<Self> {
        let file: ConfigFile =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        Self::from_file(file, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_toml(&text, path.parent()).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_file(f: ConfigFile, base: Option<&Path>) -> Result<Self> {
        let mode = f.mode.ok_or_else(|| config_error("missing key `mode`"))?;
        let seed = f.seed.ok_or_else(|| config_error("missing key `seed`"))?;

        let data = match (f.dataset, f.synthetic) {
            (Some(path), None) => {
                if f.synthetic_n.is_some() || f.synthetic_dim.is_some() {
                    return Err(config_error("`synthetic_n`/`synthetic_dim` only apply to synthetic data"));
                }
                let format = f.format.unwrap_or(FileFormat::Libsvm);
                match format {
                    FileFormat::Csv if f.target_column.is_none() => {
                        return Err(config_error("csv datasets need `target_column`"))
                    }
                    FileFormat::Csv if f.feature_dim.is_some() => {
                        return Err(config_error("`feature_dim` only applies to libsvm data"))
                    }
                    FileFormat::Libsvm if f.target_column.is_some() => {
                        return Err(config_error("`target_column` only applies to csv data"))
                    }
                    _ => {}
                }
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path,
                };
                DataSource::File { path, format, target_column: f.target_column, feature_dim: f.feature_dim }
            }
            (None, Some(kind)) => {
                if f.format.is_some() || f.target_column.is_some() || f.feature_dim.is_some() {
                    return Err(config_error("file keys given for a synthetic dataset"));
                }
                let n = f.synthetic_n.ok_or_else(|| config_error("missing key `synthetic_n`"))?;
                let dim = f.synthetic_dim.ok_or_else(|| config_error("missing key `synthetic_dim`"))?;
                positive_count("synthetic_n", n)?;
                positive_count("synthetic_dim", dim)?;
                DataSource::Synthetic { kind, n, dim }
            }
            (Some(_), Some(_)) => return Err(config_error("give either `dataset` or `synthetic`, not both")),
            (None, None) => return Err(config_error("missing key `dataset` or `synthetic`")),
        };

        if let Some(s) = f.subsample {
            positive_count("subsample", s)?;
        }
        if let Some(t) = f.test_fraction {
            if !(t > 0.0 && t < 1.0) {
                return Err(config_error(format!("`test_fraction` must lie in (0, 1), got {t}")));
            }
        }
        let bandwidth = f.bandwidth.unwrap_or(3.0);
        positive_real("bandwidth", bandwidth)?;
        let kernel = KernelSpec::new(f.kernel.unwrap_or(KernelFamily::SquaredExponential), bandwidth)?;
        let mu_over_n = f.mu_over_n.unwrap_or(1e-7);
        positive_real("mu_over_n", mu_over_n)?;

        let (solver, default_eps, default_iter) = match mode {
            Mode::Full => {
                for (key, set) in [
                    ("preconditioner", f.preconditioner.is_some()),
                    ("centers", f.centers.is_some()),
                    ("embedding_d", f.embedding_d.is_some()),
                    ("embedding_zeta", f.embedding_zeta.is_some()),
                ] {
                    if set {
                        return Err(config_error(format!("`{key}` does not apply to full mode")));
                    }
                }
                let rank = f.rank.ok_or_else(|| config_error("full mode needs `rank`"))?;
                positive_count("rank", rank)?;
                let pivot = f.pivot.unwrap_or(Pivot::Rpcholesky);
                if f.block_size.is_some() && pivot != Pivot::Rpcholesky {
                    return Err(config_error("`block_size` only applies to rpcholesky pivoting"));
                }
                let block_size = f.block_size.unwrap_or_else(|| krr_precond::lowrank::default_block_size(rank));
                positive_count("block_size", block_size)?;
                (Solver::Full { pivot, rank, block_size }, 1e-3, 250)
            }
            Mode::Restricted => {
                for (key, set) in
                    [("pivot", f.pivot.is_some()), ("rank", f.rank.is_some()), ("block_size", f.block_size.is_some())]
                {
                    if set {
                        return Err(config_error(format!("`{key}` does not apply to restricted mode")));
                    }
                }
                let centers = f.centers.ok_or_else(|| config_error("restricted mode needs `centers`"))?;
                positive_count("centers", centers)?;
                let preconditioner = f.preconditioner.unwrap_or(PreconditionerChoice::Krill);
                let embedding = match (f.embedding_d, f.embedding_zeta) {
                    (None, None) => None,
                    _ if preconditioner != PreconditionerChoice::Krill => {
                        return Err(config_error("embedding keys only apply to the krill preconditioner"))
                    }
                    (d, zeta) => {
                        let practical = EmbeddingParams::practical(centers);
                        let d = d.unwrap_or(practical.d);
                        let zeta = zeta.unwrap_or(practical.zeta.min(d));
                        positive_count("embedding_d", d)?;
                        positive_count("embedding_zeta", zeta)?;
                        if zeta > d {
                            return Err(config_error(format!("`embedding_zeta` {zeta} exceeds `embedding_d` {d}")));
                        }
                        Some(EmbeddingParams { d, zeta })
                    }
                };
                (Solver::Restricted { preconditioner, centers, embedding }, 1e-4, 100)
            }
        };

        let epsilon = f.epsilon.unwrap_or(default_eps);
        positive_real("epsilon", epsilon)?;
        let max_iter = f.max_iter.unwrap_or(default_iter);
        positive_count("max_iter", max_iter)?;
        if let Some(t) = f.true_residual_every {
            positive_count("true_residual_every", t)?;
        }
        let memory_budget = f.memory_budget.unwrap_or(DEFAULT_MEMORY_BUDGET);
        positive_count("memory_budget", memory_budget)?;

        let name = f.name.unwrap_or_else(|| match mode {
            Mode::Full => "full".to_owned(),
            Mode::Restricted => "restricted".to_owned(),
        });
        Ok(Self {
            name,
            seed,
            data,
            subsample: f.subsample,
            test_fraction: f.test_fraction,
            task: f.task.unwrap_or(Task::RegressionSmape),
            center_targets: f.center_targets.unwrap_or(false),
            kernel,
            mu_over_n,
            solver,
            epsilon,
            max_iter,
            true_residual_every: f.true_residual_every,
            memory_budget,
            output_dir: f.output_dir.unwrap_or_else(|| PathBuf::from("krr-output")),
        })
    }
}

fn positive_count(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(config_error(format!("`{key}` must be positive")));
    }
    Ok(())
}

fn positive_real(key: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(config_error(format!("`{key}` must be positive and finite, got {v}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
        mode = "full"
        seed = 4
        synthetic = "gaussian"
        synthetic_n = 100
        synthetic_dim = 3
        rank = 20
    "#;

    #[test]
    fn full_defaults() {
        let c = ExperimentConfig::from_toml(FULL, None).unwrap();
        assert_eq!(c.kernel, KernelSpec::squared_exponential(3.0).unwrap());
        assert_eq!(c.mu_over_n, 1e-7);
        assert_eq!(c.epsilon, 1e-3);
        assert_eq!(c.max_iter, 250);
        assert_eq!(c.solver, Solver::Full { pivot: Pivot::Rpcholesky, rank: 20, block_size: 2 });
        assert_eq!(c.task, Task::RegressionSmape);
        assert!(!c.center_targets);
    }

    #[test]
    fn restricted_defaults() {
        let text = "mode = \"restricted\"\nseed = 1\nsynthetic = \"clustered\"\nsynthetic_n = 50\nsynthetic_dim = 2\ncenters = 10\n";
        let c = ExperimentConfig::from_toml(text, None).unwrap();
        assert_eq!(c.epsilon, 1e-4);
        assert_eq!(c.max_iter, 100);
        assert_eq!(
            c.solver,
            Solver::Restricted { preconditioner: PreconditionerChoice::Krill, centers: 10, embedding: None }
        );
    }

    #[test]
    fn unknown_and_misplaced_keys_are_errors() {
        let err = ExperimentConfig::from_toml(&format!("{FULL}\nrank_typo = 3\n"), None).unwrap_err();
        assert!(err.to_string().contains("rank_typo"), "{err}");
        assert!(ExperimentConfig::from_toml(&format!("{FULL}\ncenters = 3\n"), None).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{FULL}\npivot = \"greedy\"\nblock_size = 3\n"), None).is_err());
        assert!(ExperimentConfig::from_toml(&FULL.replace("rank = 20", ""), None).is_err());
        assert!(ExperimentConfig::from_toml(&FULL.replace("seed = 4", ""), None).is_err());
    }

    #[test]
    fn numeric_fields_must_be_positive() {
        for extra in ["epsilon = 0.0", "bandwidth = -1.0", "mu_over_n = 0.0", "max_iter = 0", "test_fraction = 1.0"] {
            assert!(ExperimentConfig::from_toml(&format!("{FULL}\n{extra}\n"), None).is_err(), "{extra}");
        }
    }

    #[test]
    fn dataset_paths_resolve_against_config_dir() {
        let text = "mode = \"full\"\nseed = 0\nrank = 5\ndataset = \"data/x.svm\"\n";
        let c = ExperimentConfig::from_toml(text, Some(Path::new("/tmp/cfg"))).unwrap();
        match c.data {
            DataSource::File { path, format, .. } => {
                assert_eq!(path, Path::new("/tmp/cfg/data/x.svm"));
                assert_eq!(format, FileFormat::Libsvm);
            }
            other => panic!("{other:?}"),
        }
        let csv = "mode = \"full\"\nseed = 0\nrank = 5\ndataset = \"x.csv\"\nformat = \"csv\"\n";
        assert!(ExperimentConfig::from_toml(csv, None).is_err());
    }
}
