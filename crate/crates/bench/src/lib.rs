//! Experiment harness for the `krr-precond` solvers: TOML-configured
//! runs, batch aggregation and the diagnostic reports behind the
//! `krr-bench` binary.

pub mod batch;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experiment;

pub use batch::{run_batch, BatchOptions, BatchReport};
pub use config::{ExperimentConfig, Mode, Task};
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, split_train_test, test_error, Outcome, Summary};
