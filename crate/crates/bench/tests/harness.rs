use std::path::Path;
use std::process::Command;

use krr_bench::config::ExperimentConfig;
use krr_bench::{run_batch, run_experiment, split_train_test, test_error, BatchOptions, Task};
use krr_precond::Dataset;

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let text = format!("{text}\noutput_dir = {:?}\n", out.to_str().unwrap());
    ExperimentConfig::from_toml(&text, None).unwrap()
}

const TINY_FULL: &str = r#"
mode = "full"
seed = 11
synthetic = "gaussian"
synthetic_n = 300
synthetic_dim = 3
rank = 40
mu_over_n = 1e-4
bandwidth = 1.0
"#;

fn read_csv_rows(path: &Path) -> Vec<(usize, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,relative_residual"));
    lines
        .map(|l| {
            let (t, r) = l.split_once(',').unwrap();
            (t.parse().unwrap(), r.parse().unwrap())
        })
        .collect()
}

#[test]
fn tiny_full_run_converges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(TINY_FULL, dir.path());
    let outcome = run_experiment(&cfg).unwrap();
    assert!(outcome.summary.converged);
    assert_eq!(outcome.exit_code(), 0);
    let rows = read_csv_rows(&dir.path().join("residuals.csv"));
    assert_eq!(rows.len(), outcome.summary.iterations + 1);
    assert_eq!(rows[0], (0, 1.0));
    assert!(rows.last().unwrap().1 < cfg.epsilon);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], true);
    assert_eq!(summary["iterations_to_epsilon"], outcome.summary.iterations);
    assert_eq!(summary["solver"]["preconditioner"], "rpcholesky");
    assert!(summary["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn residual_history_is_bit_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for text in [TINY_FULL.to_owned(), restricted("krill", 1e-4, 100)] {
        run_experiment(&config(&text, a.path())).unwrap();
        run_experiment(&config(&text, b.path())).unwrap();
        let x = std::fs::read(a.path().join("residuals.csv")).unwrap();
        let y = std::fs::read(b.path().join("residuals.csv")).unwrap();
        assert!(x.len() > 40);
        assert_eq!(x, y);
    }
}

fn restricted(preconditioner: &str, epsilon: f64, max_iter: usize) -> String {
    format!(
        r#"
mode = "restricted"
seed = 5
synthetic = "clustered"
synthetic_n = 1500
synthetic_dim = 4
centers = 60
mu_over_n = 1e-6
preconditioner = "{preconditioner}"
epsilon = {epsilon:e}
max_iter = {max_iter}
"#
    )
}

#[test]
fn krill_matches_unpreconditioned_solution_with_fewer_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let none = run_experiment(&config(&restricted("none", 1e-12, 5000), &dir.path().join("none"))).unwrap();
    let krill = run_experiment(&config(&restricted("krill", 1e-12, 5000), &dir.path().join("krill"))).unwrap();
    assert!(none.summary.converged && krill.summary.converged);
    assert!(krill.summary.iterations <= none.summary.iterations);
    let diff: f64 = none.solution.iter().zip(&krill.solution).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = none.solution.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff <= 1e-6 * scale, "diff {diff} scale {scale}");
}

#[test]
fn batch_writes_summaries_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    std::fs::write(configs.join("a.toml"), TINY_FULL.replace("seed = 11\n", "")).unwrap();
    std::fs::write(configs.join("b.toml"), TINY_FULL.replace("rank = 40", "rank = 40\nmax_iter = 2\nepsilon = 1e-12"))
        .unwrap();
    std::fs::write(configs.join("c.toml"), restricted("falkon", 1e-4, 100)).unwrap();
    std::fs::write(configs.join("notes.txt"), "ignored").unwrap();
    let out = dir.path().join("out");
    let report = run_batch(&BatchOptions { configs, output_dir: out.clone(), seed: 3, workers: 2 }).unwrap();
    assert_eq!(report.entries.len(), 3);
    assert_eq!(report.exit_code(), 0);
    for stem in ["a", "b", "c"] {
        assert!(out.join(stem).join("summary.json").is_file());
        assert!(out.join(stem).join("residuals.csv").is_file());
    }
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(a["seed"], 3);
    assert_eq!(a["name"], "a");
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert!(runs.lines().nth(2).unwrap().starts_with("b,false,,2"), "{runs}");

    let curve = std::fs::read_to_string(out.join("fraction_solved.csv")).unwrap();
    let rows: Vec<(usize, f64)> = curve
        .lines()
        .skip(1)
        .map(|l| {
            let (t, f) = l.split_once(',').unwrap();
            (t.parse().unwrap(), f.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 251);
    assert_eq!(rows[0], (0, 0.0));
    assert!(rows.windows(2).all(|w| w[0].1 <= w[1].1));
    assert!((rows.last().unwrap().1 - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn batch_reports_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let configs = dir.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    std::fs::write(configs.join("good.toml"), TINY_FULL).unwrap();
    std::fs::write(configs.join("bad.toml"), format!("{TINY_FULL}\nranks = 3\n")).unwrap();
    let report = run_batch(&BatchOptions { configs, output_dir: dir.path().join("out"), seed: 0, workers: 1 }).unwrap();
    assert_eq!(report.exit_code(), 1);
    let bad = report.entries.iter().find(|e| e.name == "bad").unwrap();
    assert!(bad.error.as_deref().unwrap().contains("ranks"));
}

fn indexed_dataset(n: usize) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 0.5]).collect();
    Dataset::from_rows(&rows, Some((0..n).map(|i| i as f64).collect())).unwrap()
}

#[test]
fn split_is_disjoint_exhaustive_and_deterministic() {
    let data = indexed_dataset(50);
    let (train, test) = split_train_test(&data, 0.3, 9).unwrap();
    assert_eq!(test.len(), 15);
    assert_eq!(train.len(), 35);
    let mut ids: Vec<usize> =
        train.targets().unwrap().iter().chain(test.targets().unwrap()).map(|&v| v as usize).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..50).collect::<Vec<_>>());
    let (train2, test2) = split_train_test(&data, 0.3, 9).unwrap();
    assert_eq!(train, train2);
    assert_eq!(test, test2);
    let (_, other) = split_train_test(&data, 0.3, 10).unwrap();
    assert_ne!(other, test);
}

#[test]
fn split_rejects_empty_sides() {
    let data = indexed_dataset(10);
    assert!(split_train_test(&data, 0.01, 0).is_err());
    assert!(split_train_test(&data, 0.99, 0).is_err());
    assert!(split_train_test(&data, 0.0, 0).is_err());
    assert!(split_train_test(&data, 0.04, 0).is_err());
    assert_eq!(split_train_test(&data, 0.05, 0).unwrap().1.len(), 1);
}

#[test]
fn test_error_cases() {
    let labels = [1.0, -1.0, -1.0, 1.0];
    assert_eq!(test_error(&[2.0, -0.5, -3.0, 0.1], &labels, Task::ClassificationSign).unwrap(), 0.0);
    assert_eq!(test_error(&[-2.0, 0.5, 3.0, -0.1], &labels, Task::ClassificationSign).unwrap(), 1.0);
    // Wrong on the second and fourth points; a zero prediction counts as wrong.
    assert_eq!(test_error(&[0.3, 0.2, -1.0, 0.0], &labels, Task::ClassificationSign).unwrap(), 0.5);
    assert!(test_error(&[1.0], &[0.0], Task::ClassificationSign).is_err());
    assert!(test_error(&[1.0, 2.0], &[1.0], Task::ClassificationSign).is_err());

    assert_eq!(test_error(&[1.0, -2.0, 0.0], &[1.0, -2.0, 0.0], Task::RegressionSmape).unwrap(), 0.0);
    // |1-3| / 2 = 1 and |2-2| / 2 = 0.
    assert_eq!(test_error(&[1.0, 2.0], &[3.0, 2.0], Task::RegressionSmape).unwrap(), 0.5);
}

#[test]
fn libsvm_classification_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for i in 0..240 {
        let x = (i as f64 * 0.37).sin() * 3.0;
        let y = (i as f64 * 0.11).cos() * 3.0;
        let label = if x + 0.5 * y > 0.0 { 1 } else { 0 };
        text.push_str(&format!("{label} 1:{x} 2:{y}\n"));
    }
    let data = dir.path().join("toy.svm");
    std::fs::write(&data, text).unwrap();
    let cfg_text = format!(
        "mode = \"full\"\nseed = 2\ndataset = \"toy.svm\"\nrank = 60\nbandwidth = 1.0\nmu_over_n = 1e-4\ntest_fraction = 0.25\ntask = \"classification_sign\"\noutput_dir = {:?}\n",
        dir.path().join("out").to_str().unwrap()
    );
    let cfg = ExperimentConfig::from_toml(&cfg_text, Some(dir.path())).unwrap();
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.summary.n_test, 60);
    assert_eq!(outcome.summary.n_train, 180);
    assert!(outcome.summary.test_error.unwrap() < 0.2, "{:?}", outcome.summary.test_error);
}

#[test]
fn csv_restricted_regression_with_subsample() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,target,b\n");
    for i in 0..400 {
        let a = (i as f64 * 0.05).sin();
        let b = (i as f64 * 0.013).cos();
        text.push_str(&format!("{a},{},{b}\n", 2.0 + a * b));
    }
    std::fs::write(dir.path().join("d.csv"), text).unwrap();
    let cfg_text = format!(
        "mode = \"restricted\"\nseed = 4\ndataset = \"d.csv\"\nformat = \"csv\"\ntarget_column = \"target\"\nsubsample = 300\ncenters = 40\nbandwidth = 1.0\ntest_fraction = 0.2\ncenter_targets = true\noutput_dir = {:?}\n",
        dir.path().join("out").to_str().unwrap()
    );
    let cfg = ExperimentConfig::from_toml(&cfg_text, Some(dir.path())).unwrap();
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.summary.n_train + outcome.summary.n_test, 300);
    assert!(outcome.summary.converged);
    assert!(outcome.summary.test_error.unwrap() < 0.05);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("mode = \"full\"\nseed = 0\nrank = 5\ndataset = \"/nonexistent/x.svm\"\n", dir.path());
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("/nonexistent/x.svm"));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_krr-bench"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let base = [
        "solve-full",
        "--synthetic",
        "gaussian",
        "--synthetic-n",
        "200",
        "--synthetic-dim",
        "2",
        "--rank",
        "30",
        "--bandwidth",
        "1.0",
        "--mu-over-n",
        "1e-3",
    ];
    let ok = cli().args(base).args(["--seed", "1", "--output-dir"]).arg(&out).status().unwrap();
    assert_eq!(ok.code(), Some(0));
    assert!(out.join("summary.json").is_file());

    let stalled = cli()
        .args(base)
        .args(["--seed", "1", "--max-iter", "1", "--epsilon", "1e-14", "--output-dir"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(stalled.code(), Some(2));

    let no_seed = cli().args(base).arg("--output-dir").arg(&out).output().unwrap();
    assert_eq!(no_seed.status.code(), Some(1));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "mode = \"full\"\nrank = 3\nsynthetic = \"gaussian\"\nsynthetic_n = 10\nsynthetic_dim = 2\nbogus = 1\n",
    )
    .unwrap();
    let unknown = cli().args(["solve-full", "--seed", "0", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("bogus"));

    let wrong_mode = cli().args(["solve-restricted", "--seed", "0", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(wrong_mode.status.code(), Some(1));
}

#[test]
fn cli_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = cli()
            .args([
                "solve-restricted",
                "--seed",
                "8",
                "--synthetic",
                "clustered",
                "--synthetic-n",
                "800",
                "--synthetic-dim",
                "3",
                "--centers",
                "50",
                "--output-dir",
            ])
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        std::fs::read(out.join("residuals.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn cli_diagnostics_reports() {
    let dir = tempfile::tempdir().unwrap();
    let adv = dir.path().join("adv.json");
    let status =
        cli().args(["adversarial", "--seed", "0", "--n", "216", "--trials", "9", "--out"]).arg(&adv).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&adv).unwrap()).unwrap();
    assert_eq!(report["uniform_failure"]["blocks"], serde_json::json!([210, 6]));
    assert_eq!(report["uniform_failure"]["rpcholesky"].as_array().unwrap().len(), 9);

    let thm = dir.path().join("thm.json");
    let status = cli()
        .args([
            "verify-theorems",
            "--seed",
            "0",
            "--rpc-n",
            "100",
            "--rpc-trials",
            "20",
            "--krill-n",
            "400",
            "--krill-k",
            "15",
            "--krill-trials",
            "10",
            "--embedding",
            "practical",
            "--out",
        ])
        .arg(&thm)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&thm).unwrap()).unwrap();
    assert_eq!(report["rpc"]["trials"].as_array().unwrap().len(), 20);
    assert_eq!(report["krill"]["trials"].as_array().unwrap().len(), 10);
    assert_eq!(report["krill_holds"], true);
}
