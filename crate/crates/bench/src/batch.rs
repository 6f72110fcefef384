//! Batch runs over a directory of config files, with the aggregate
//! fraction-solved curve.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{config_error, BenchError, Result};
use crate::experiment::run_experiment;

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub configs: PathBuf,
    pub output_dir: PathBuf,
    /// Seed for configs that do not set one.
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchEntry {
    pub config: PathBuf,
    pub name: String,
    pub converged: bool,
    pub iterations_to_epsilon: Option<usize>,
    pub max_iter: usize,
    pub exit_code: i32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchReport {
    pub entries: Vec<BatchEntry>,
    /// `(t, fraction of runs solved within t iterations)` for t = 0..=max_iter.
    pub fraction_solved: Vec<(usize, f64)>,
}

impl BatchReport {
    /// 1 if any config could not be loaded or run, else 3 if any solver
    /// broke down, else 0. Unsolved runs are part of the curve, not errors.
    pub fn exit_code(&self) -> i32 {
        let codes: Vec<i32> = self.entries.iter().map(|e| e.exit_code).collect();
        if codes.contains(&1) {
            1
        } else if codes.contains(&3) {
            3
        } else {
            0
        }
    }
}

/// `*.toml` files in `dir`, sorted by name.
pub fn discover_configs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| BenchError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| BenchError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "toml") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(config_error(format!("no .toml configs in {}", dir.display())));
    }
    Ok(paths)
}

fn load_for_batch(path: &Path, out: &Path, seed: u64) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| config_error(format!("{}: {e}", path.display())))?;
    if !table.contains_key("seed") {
        let seed = i64::try_from(seed).map_err(|_| config_error("seed does not fit in a TOML integer"))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    if table.contains_key("output_dir") {
        return Err(config_error(format!("{}: batch runs choose `output_dir` themselves", path.display())));
    }
    let stem = path.file_stem().unwrap_or_default();
    table.insert("output_dir".into(), toml::Value::String(out.join(stem).to_string_lossy().into_owned()));
    table.entry("name").or_insert_with(|| toml::Value::String(stem.to_string_lossy().into_owned()));
    ExperimentConfig::from_table(table, path.parent()).map_err(|e| match e {
        BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn run_one(path: &Path, opts: &BatchOptions) -> BatchEntry {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let failed = |e: BenchError, max_iter| BatchEntry {
        config: path.to_path_buf(),
        name: stem.clone(),
        converged: false,
        iterations_to_epsilon: None,
        max_iter,
        exit_code: e.exit_code(),
        error: Some(e.to_string()),
    };
    let cfg = match load_for_batch(path, &opts.output_dir, opts.seed) {
        Ok(c) => c,
        Err(e) => return failed(e, 0),
    };
    match run_experiment(&cfg) {
        Ok(outcome) => BatchEntry {
            config: path.to_path_buf(),
            name: cfg.name.clone(),
            converged: outcome.summary.converged,
            iterations_to_epsilon: outcome.summary.iterations_to_epsilon,
            max_iter: cfg.max_iter,
            exit_code: outcome.exit_code(),
            error: outcome.summary.error,
        },
        Err(e) => failed(e, cfg.max_iter),
    }
}

pub fn fraction_solved(entries: &[BatchEntry]) -> Vec<(usize, f64)> {
    let horizon = entries.iter().map(|e| e.max_iter).max().unwrap_or(0);
    let total = entries.len().max(1) as f64;
    (0..=horizon)
        .map(|t| {
            let solved = entries.iter().filter(|e| e.iterations_to_epsilon.is_some_and(|i| i <= t)).count();
            (t, solved as f64 / total)
        })
        .collect()
}

/// Runs every config in parallel and writes one directory per config plus
/// `fraction_solved.csv` and `runs.csv` in the output directory.
pub fn run_batch(opts: &BatchOptions) -> Result<BatchReport> {
    let paths = discover_configs(&opts.configs)?;
    std::fs::create_dir_all(&opts.output_dir).map_err(|e| BenchError::io(&opts.output_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| config_error(e.to_string()))?;
    let entries: Vec<BatchEntry> = pool.install(|| paths.par_iter().map(|p| run_one(p, opts)).collect());
    let fraction = fraction_solved(&entries);

    let mut curve = String::from("iteration,fraction_solved\n");
    for (t, f) in &fraction {
        let _ = writeln!(curve, "{t},{f}");
    }
    let path = opts.output_dir.join("fraction_solved.csv");
    std::fs::write(&path, curve).map_err(|e| BenchError::io(&path, e))?;

    let mut runs = String::from("config,converged,iterations_to_epsilon,exit_code\n");
    for e in &entries {
        let iters = e.iterations_to_epsilon.map(|i| i.to_string()).unwrap_or_default();
        let _ = writeln!(runs, "{},{},{},{}", e.name, e.converged, iters, e.exit_code);
    }
    let path = opts.output_dir.join("runs.csv");
    std::fs::write(&path, runs).map_err(|e| BenchError::io(&path, e))?;

    Ok(BatchReport { entries, fraction_solved: fraction })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(iters: Option<usize>, max_iter: usize) -> BatchEntry {
        BatchEntry {
            config: PathBuf::new(),
            name: String::new(),
            converged: iters.is_some(),
            iterations_to_epsilon: iters,
            max_iter,
            exit_code: if iters.is_some() { 0 } else { 2 },
            error: None,
        }
    }

    #[test]
    fn fraction_solved_steps() {
        let curve = fraction_solved(&[entry(Some(1), 3), entry(Some(3), 3), entry(None, 4), entry(Some(0), 2)]);
        let values: Vec<f64> = curve.iter().map(|c| c.1).collect();
        assert_eq!(values, vec![0.25, 0.5, 0.5, 0.75, 0.75]);
    }

    #[test]
    fn batch_exit_code_ignores_non_convergence() {
        let mut report = BatchReport { entries: vec![entry(None, 3), entry(Some(1), 3)], fraction_solved: vec![] };
        assert_eq!(report.exit_code(), 0);
        report.entries[0].exit_code = 3;
        assert_eq!(report.exit_code(), 3);
        report.entries[1].exit_code = 1;
        assert_eq!(report.exit_code(), 1);
    }
}
