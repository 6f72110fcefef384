//! Sparse sign embeddings: random d x N matrices with exactly `zeta`
//! nonzeros `+-1/sqrt(zeta)` per column, at distinct uniformly random rows.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{orthonormality_defect, symmetric_eigenvalues};

/// Embedding stored column by column: column `j` owns entries
/// `rows[j*zeta .. (j+1)*zeta]` and the matching `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignEmbedding {
    d: usize,
    n: usize,
    zeta: usize,
    rows: Vec<usize>,
    values: Vec<f64>,
    seed: Option<u64>,
}

/// Embedding dimension and sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub d: usize,
    pub zeta: usize,
}

impl EmbeddingParams {
    /// `d = 2k`, `zeta = min(8, 2k)`.
    pub fn practical(k: usize) -> Self {
        let d = 2 * k.max(1);
        Self { d, zeta: d.min(8) }
    }

    /// Subspace-embedding scalings with calibration constants 4 and 2:
    /// `d = ceil(4 k ln(k / delta))`, `zeta = ceil(2 ln(k / delta))`,
    /// where `delta` is the target failure probability.
    pub fn theory(k: usize, delta: f64) -> Self {
        let log = (k.max(1) as f64 / delta).ln().max(1.0);
        let d = ((4.0 * k.max(1) as f64 * log).ceil() as usize).max(1);
        let zeta = ((2.0 * log).ceil() as usize).clamp(1, d);
        Self { d, zeta }
    }
}

pub fn build_embedding(d: usize, n: usize, zeta: usize, seed: u64) -> Result<SparseSignEmbedding> {
    SparseSignEmbedding::new(d, n, zeta, seed)
}

impl SparseSignEmbedding {
    pub fn new(d: usize, n: usize, zeta: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(invalid("embedding dimensions must be positive"));
        }
        if zeta == 0 || zeta > d {
            return Err(invalid(format!("sparsity must be in 1..={d}, got {zeta}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (zeta as f64).sqrt();
        let mut rows = Vec::with_capacity(n * zeta);
        let mut values = Vec::with_capacity(n * zeta);
        for _ in 0..n {
            rows.extend(rand::seq::index::sample(&mut rng, d, zeta).iter());
            for _ in 0..zeta {
                values.push(if rng.random::<bool>() { scale } else { -scale });
            }
        }
        Ok(Self { d, n, zeta, rows, values, seed: Some(seed) })
    }

    pub fn with_params(params: EmbeddingParams, n: usize, seed: u64) -> Result<Self> {
        Self::new(params.d, n, params.zeta, seed)
    }

    /// The N x N identity, as an exact "sketch".
    pub fn identity(n: usize) -> Self {
        Self { d: n, n, zeta: 1, rows: (0..n).collect(), values: vec![1.0; n], seed: None }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn zeta(&self) -> usize {
        self.zeta
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Row indices and values of column `j`.
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let r = j * self.zeta..(j + 1) * self.zeta;
        (&self.rows[r.clone()], &self.values[r])
    }

    /// `(row, col, value)` triplets in column order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows.iter().zip(&self.values).enumerate().map(|(k, (&r, &v))| (r, k / self.zeta, v))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.d, self.n);
        for (r, c, v) in self.triplets() {
            m[(r, c)] = v;
        }
        m
    }

    /// `Phi v` for a length-N vector.
    pub fn apply_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: v.len() });
        }
        let mut out = vec![0.0; self.d];
        self.accumulate(v, &mut out);
        Ok(out)
    }

    fn accumulate(&self, v: &[f64], out: &mut [f64]) {
        for (j, vj) in v.iter().enumerate() {
            let (rows, vals) = self.column(j);
            for (&r, &s) in rows.iter().zip(vals) {
                out[r] += s * vj;
            }
        }
    }

    /// `Phi M` for an N x k matrix, parallel over output columns.
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.nrows() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: m.nrows() });
        }
        let mut out = DMatrix::zeros(self.d, m.ncols());
        out.as_mut_slice()
            .par_chunks_mut(self.d)
            .enumerate()
            .for_each(|(c, col)| self.accumulate(m.column(c).as_slice(), col));
        Ok(out)
    }

    /// Adds `Phi(:, start..start+m) B` to `out` for an m x k row block `B`
    /// of the input, so that `Phi M` can be accumulated from streamed rows.
    pub fn accumulate_rows(&self, start: usize, block: &DMatrix<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        if start + block.nrows() > self.n {
            return Err(Error::DimensionMismatch { expected: self.n, found: start + block.nrows() });
        }
        if out.nrows() != self.d || out.ncols() != block.ncols() {
            return Err(Error::DimensionMismatch { expected: self.d, found: out.nrows() });
        }
        out.as_mut_slice().par_chunks_mut(self.d).enumerate().for_each(|(c, col)| {
            for (i, x) in block.column(c).iter().enumerate() {
                let (rows, vals) = self.column(start + i);
                for (&r, &s) in rows.iter().zip(vals) {
                    col[r] += s * x;
                }
            }
        });
        Ok(())
    }
}

pub fn apply_embedding(phi: &SparseSignEmbedding, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    phi.apply(m)
}

/// Extreme eigenvalues of `(Phi B)* (Phi B)` for an orthonormal basis `B`,
/// i.e. the range of `||Phi v||^2 / ||v||^2` over `v` in `range(B)`.
pub fn distortion_check(phi: &SparseSignEmbedding, basis: &DMatrix<f64>) -> Result<(f64, f64)> {
    if basis.ncols() == 0 {
        return Err(invalid("basis has no columns"));
    }
    let defect = orthonormality_defect(basis);
    if !(defect <= 1e-8) {
        return Err(invalid(format!("basis is not orthonormal (Gram deviation {defect:e})")));
    }
    let y = phi.apply(basis)?;
    let eigs = symmetric_eigenvalues(&(y.transpose() * &y))?;
    Ok((eigs[0], eigs[eigs.len() - 1]))
}
