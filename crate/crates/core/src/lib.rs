//! Matrix-free solvers for kernel ridge regression with randomized
//! preconditioners.
//!
//! The crate solves two linear systems built from an N x N psd kernel
//! matrix `A` that is only accessed through a [`kernel::KernelOracle`]:
//!
//! * full-data KRR, `(A + mu I) beta = y`, preconditioned with a
//!   randomly pivoted partial Cholesky (RPCholesky) Nystrom approximation;
//! * restricted KRR on k centers `S`,
//!   `[A(S,:) A(:,S) + mu A(S,S)] beta = A(S,:) y`, preconditioned with a
//!   sparse-sketch Gram approximation (KRILL) or a FALKON-style baseline.
//!
//! Greedy and uniform pivoting are provided as baselines, along with the
//! adversarial matrices and Monte Carlo checks in [`diagnostics`].

// Negated comparisons such as `!(x > 0.0)` are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod kernel;
pub mod krr;
pub mod linalg;
pub mod lowrank;
pub mod pcg;
pub mod precond;
pub mod sketch;
pub mod synthetic;

pub use error::{Error, Result};
pub use kernel::{
    eval_kernel, standardize, DataKernel, Dataset, ExplicitKernel, KernelFamily, KernelOracle, KernelSpec, Standardizer,
};
pub use krr::{
    predict, select_centers_uniform, smape, solve_full_krr, solve_restricted_krr, FullKrrProblem, RestrictedKrrProblem,
    RestrictedPreconditioner,
};
pub use lowrank::{
    greedy_cholesky, rpcholesky, tail_rank, trace_residual, uniform_nystrom, PartialCholeskyFactor, PivotRule,
};
pub use pcg::{pcg, LinearOperator, PcgOptions, SolveReport};
pub use precond::{
    build_falkon, build_krill, build_rpc_preconditioner, precond_condition_number, CholeskyPreconditioner,
    IdentityPreconditioner, Preconditioner, RpcPreconditioner,
};
pub use sketch::{build_embedding, distortion_check, SparseSignEmbedding};
