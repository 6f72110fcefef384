//! Kernel functions, datasets, standardization, and the matrix-free kernel
//! oracle.
//!
//! Every other module reaches the N x N kernel matrix `A` only through the
//! [`KernelOracle`] trait: single entries, column blocks, the diagonal, and
//! a streamed matrix-vector product. Two backends are provided:
//!
//! * [`DataKernel`] evaluates `a_ij = K(x_i, x_j)` on demand from a
//!   [`Dataset`], optionally holding a dense cache when it fits the memory
//!   budget.
//! * [`ExplicitKernel`] wraps a stored psd matrix (adversarial examples,
//!   synthetic spectra, tests).

use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `exp(-||x - y||^2 / (2 sigma^2))`
    SquaredExponential,
    /// `exp(-||x - y||_1 / sigma)`
    Laplace1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn squared_exponential(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, bandwidth)
    }

    pub fn laplace1(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplace1, bandwidth)
    }

    /// Kernel value without the dimension check; callers guarantee equal lengths.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Laplace1 => {
                let l1: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
                (-l1 / self.bandwidth).exp()
            }
        }
    }
}

/// Evaluates `K(x, y)` for the given kernel.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    Ok(spec.eval_unchecked(x, y))
}

/// Feature matrix (row-major) plus optional regression/classification targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    dim: usize,
    features: Vec<f64>,
    targets: Option<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset from row-major features. Rejects empty input,
    /// ragged shapes and non-finite values.
    pub fn new(dim: usize, features: Vec<f64>, targets: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be at least 1"));
        }
        if features.is_empty() || !features.len().is_multiple_of(dim) {
            return Err(invalid(format!(
                "feature buffer of length {} does not hold whole rows of dimension {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite feature in row {}", pos / dim)));
        }
        if let Some(t) = &targets {
            check_len(n, t.len())?;
            if let Some(pos) = t.iter().position(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite target in row {pos}")));
            }
        }
        Ok(Self { n, dim, features, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Option<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(invalid(format!("row {bad} has {} features, expected {dim}", rows[bad].len())));
        }
        Self::new(dim, rows.concat(), targets)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> Option<&[f64]> {
        self.targets.as_deref()
    }

    pub fn with_targets(mut self, targets: Vec<f64>) -> Result<Self> {
        check_len(self.n, targets.len())?;
        self.targets = Some(targets);
        Ok(self)
    }

    /// Rows selected by `indices`, in that order. Duplicates are kept.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n {
                return Err(Error::IndexOutOfRange { index: i, len: self.n });
            }
            features.extend_from_slice(self.row(i));
        }
        let targets = self.targets.as_ref().map(|t| indices.iter().map(|&i| t[i]).collect());
        Self::new(self.dim, features, targets)
    }
}

/// Per-column affine map to zero mean and unit population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// `1 / std` per column, or 0 for constant columns.
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let (n, dim) = (data.len() as f64, data.dim());
        let mut mean = vec![0.0; dim];
        for i in 0..data.len() {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        let mut scale = vec![0.0f64; dim];
        for i in 0..data.len() {
            for (k, v) in data.row(i).iter().enumerate() {
                let c = v - mean[k];
                var[k] += c * c;
                scale[k] = scale[k].max(v.abs());
            }
        }
        let inv_std = var
            .iter()
            .zip(&scale)
            .map(|(&s, &magnitude)| {
                let std = (s / n).sqrt();
                // Spread at rounding level relative to the column magnitude is a constant column.
                if std <= 1e-12 * magnitude.max(f64::MIN_POSITIVE) {
                    0.0
                } else {
                    1.0 / std
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        check_len(self.mean.len(), data.dim())?;
        let mut features = data.features.clone();
        for row in features.chunks_mut(data.dim) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) * self.inv_std[k];
            }
        }
        Dataset::new(data.dim, features, data.targets.clone())
    }
}

/// Standardizes every feature column (population convention). Constant
/// columns become all zeros.
pub fn standardize(data: &Dataset) -> Result<Dataset> {
    if data.len() < 2 {
        return Err(invalid("standardization needs at least two rows"));
    }
    Standardizer::fit(data).transform(data)
}

/// Matrix-free access to a symmetric psd kernel matrix.
///
/// Implementations must be deterministic and side-effect free so that all
/// methods can be called from many threads at once.
pub trait KernelOracle: Sync {
    /// Number of rows (and columns) N.
    fn size(&self) -> usize;

    /// Entry `a_ij`; indices are assumed in range.
    fn entry(&self, i: usize, j: usize) -> f64;

    fn diag(&self) -> Vec<f64> {
        (0..self.size()).map(|i| self.entry(i, i)).collect()
    }

    fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    /// The submatrix `A(rows, cols)`; indices are assumed in range.
    fn block(&self, rows: Range<usize>, cols: &[usize]) -> DMatrix<f64> {
        let m = rows.len();
        let mut out = DMatrix::zeros(m, cols.len());
        out.as_mut_slice().par_chunks_mut(m.max(1)).zip(cols.par_iter()).for_each(|(col, &j)| {
            for (slot, i) in col.iter_mut().zip(rows.clone()) {
                *slot = self.entry(i, j);
            }
        });
        out
    }

    /// `A(:, cols)`, with index validation. Duplicates are allowed.
    fn columns(&self, cols: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.size();
        if let Some(&bad) = cols.iter().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        Ok(self.block(0..n, cols))
    }

    /// `out = A v`, streamed over rows. Each output entry is accumulated
    /// sequentially so the result does not depend on thread scheduling.
    fn matvec(&self, v: &[f64], out: &mut [f64]) {
        let n = self.size();
        debug_assert_eq!(v.len(), n);
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut acc = 0.0;
            for (j, vj) in v.iter().enumerate() {
                acc += self.entry(i, j) * vj;
            }
            *o = acc;
        });
    }
}

/// Kernel matrix backed by a stored dense matrix.
#[derive(Debug, Clone)]
pub struct ExplicitKernel {
    matrix: DMatrix<f64>,
}

impl ExplicitKernel {
    /// Wraps a square matrix. Symmetry is enforced by averaging with the
    /// transpose; positive semidefiniteness is the caller's contract.
    pub fn new(mut matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch { expected: matrix.nrows(), found: matrix.ncols() });
        }
        if matrix.nrows() == 0 {
            return Err(invalid("empty kernel matrix"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel matrix has non-finite entries"));
        }
        crate::linalg::symmetrize(&mut matrix);
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

impl KernelOracle for ExplicitKernel {
    fn size(&self) -> usize {
        self.matrix.nrows()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    fn block(&self, rows: Range<usize>, cols: &[usize]) -> DMatrix<f64> {
        let m = rows.len();
        let mut out = DMatrix::zeros(m, cols.len());
        for (c, &j) in cols.iter().enumerate() {
            out.column_mut(c).copy_from(&self.matrix.view((rows.start, j), (m, 1)));
        }
        out
    }

    fn matvec(&self, v: &[f64], out: &mut [f64]) {
        let n = self.size();
        // Column-major gemv: accumulate columns in a fixed order.
        out.iter_mut().for_each(|o| *o = 0.0);
        let data = self.matrix.as_slice();
        // Split rows across threads; every thread walks all columns in order.
        let chunk = 256;
        out.par_chunks_mut(chunk).enumerate().for_each(|(b, o)| {
            let start = b * chunk;
            for (j, vj) in v.iter().enumerate() {
                let col = &data[j * n + start..j * n + start + o.len()];
                for (oi, a) in o.iter_mut().zip(col) {
                    *oi += a * vj;
                }
            }
        });
    }
}

/// Kernel matrix evaluated on demand from a dataset.
#[derive(Debug, Clone)]
pub struct DataKernel {
    data: Dataset,
    spec: KernelSpec,
}

impl DataKernel {
    pub fn new(data: Dataset, spec: KernelSpec) -> Self {
        Self { data, spec }
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Evaluates the whole N x N matrix.
    pub fn materialize(&self) -> ExplicitKernel {
        let n = self.data.len();
        let mut m = DMatrix::zeros(n, n);
        m.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(j, col)| {
            let xj = self.data.row(j);
            for (i, slot) in col.iter_mut().enumerate() {
                *slot = self.spec.eval_unchecked(self.data.row(i), xj);
            }
        });
        ExplicitKernel { matrix: m }
    }

    /// Bytes needed to hold the dense kernel matrix.
    pub fn dense_bytes(&self) -> usize {
        self.data.len().saturating_mul(self.data.len()).saturating_mul(8)
    }
}

impl KernelOracle for DataKernel {
    fn size(&self) -> usize {
        self.data.len()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.spec.eval_unchecked(self.data.row(i), self.data.row(j))
    }

    fn diag(&self) -> Vec<f64> {
        // K(x, x) = 1 for both families.
        vec![1.0; self.data.len()]
    }
}

/// Number of rows per streamed block so that a `rows x width` block of f64
/// fits in `budget_bytes` (at least one row).
pub fn rows_per_block(budget_bytes: usize, width: usize) -> usize {
    (budget_bytes / (8 * width.max(1))).max(1)
}
