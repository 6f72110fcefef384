//! Partial Cholesky / column Nystrom approximation `A ~ F F*` with three
//! pivot rules, plus the mu-tail rank.
//!
//! All three rules share one update: given new pivots `S'`, form
//! `G = A(:,S') - F F(S',:)*`, factor `G(S',:) = R* R`, append `G R^{-1}`
//! to `F`, and subtract the squared row norms of the new columns from the
//! residual diagonal `d`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::KernelOracle;
use crate::linalg::symmetrize;

/// Residual diagonal entries below this fraction of the original diagonal
/// entry are treated as exhausted (set to zero and never sampled). The
/// updates accumulate roundoff of order `r * eps * a_ii`, so anything below
/// this level carries no information about the remaining column.
const RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum PivotRule {
    RpCholesky { block: usize, seed: u64 },
    Greedy,
    Uniform { seed: u64 },
}

impl PivotRule {
    pub fn name(&self) -> &'static str {
        match self {
            PivotRule::RpCholesky { .. } => "rpcholesky",
            PivotRule::Greedy => "greedy",
            PivotRule::Uniform { .. } => "uniform",
        }
    }
}

/// `min(100, r/10)` rounded up to at least 1.
pub fn default_block_size(r: usize) -> usize {
    (r / 10).clamp(1, 100)
}

/// Low-rank factor `F` (N x r') with its pivots and final residual diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialCholeskyFactor {
    pub f: DMatrix<f64>,
    pub pivots: Vec<usize>,
    pub residual_diag: Vec<f64>,
}

impl PartialCholeskyFactor {
    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    /// Number of columns actually produced (may be below the requested rank).
    pub fn rank(&self) -> usize {
        self.f.ncols()
    }

    pub fn residual_trace(&self) -> f64 {
        self.residual_diag.iter().sum()
    }

    /// `F F*` as a dense matrix.
    pub fn approximation(&self) -> DMatrix<f64> {
        &self.f * self.f.transpose()
    }

    /// Writes the factor as little-endian `u64 N, u64 r, r x u64 pivots`
    /// followed by the column-major `f64` payload.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_u64::<LittleEndian>(self.n() as u64)?;
        w.write_u64::<LittleEndian>(self.rank() as u64)?;
        for &p in &self.pivots {
            w.write_u64::<LittleEndian>(p as u64)?;
        }
        for &v in self.f.as_slice() {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a factor written by [`write_to`](Self::write_to). The residual
    /// diagonal is recomputed from `oracle`, which must be the matrix the
    /// factor was built from.
    pub fn read_from(path: &Path, oracle: &dyn KernelOracle) -> Result<Self> {
        let parse = |message: String| Error::Parse { path: path.to_path_buf(), line: 0, message };
        let mut r = BufReader::new(File::open(path)?);
        let n = r.read_u64::<LittleEndian>()? as usize;
        let rank = r.read_u64::<LittleEndian>()? as usize;
        if n != oracle.size() {
            return Err(parse(format!("factor has {n} rows, kernel has {}", oracle.size())));
        }
        if rank > n {
            return Err(parse(format!("rank {rank} exceeds size {n}")));
        }
        let mut pivots = Vec::with_capacity(rank);
        for _ in 0..rank {
            let p = r.read_u64::<LittleEndian>()? as usize;
            if p >= n {
                return Err(parse(format!("pivot {p} out of range")));
            }
            pivots.push(p);
        }
        let mut data = vec![0.0; n * rank];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(parse(format!("{} trailing bytes", rest.len())));
        }
        let f = DMatrix::from_vec(n, rank, data);
        let mut residual_diag = oracle.diag();
        for (i, d) in residual_diag.iter_mut().enumerate() {
            *d = (*d - f.row(i).norm_squared()).max(0.0);
        }
        for &p in &pivots {
            residual_diag[p] = 0.0;
        }
        Ok(Self { f, pivots, residual_diag })
    }
}

/// Incremental partial Cholesky state shared by the pivot rules.
struct Builder<'a> {
    oracle: &'a dyn KernelOracle,
    f: DMatrix<f64>,
    cols: usize,
    pivots: Vec<usize>,
    d: Vec<f64>,
    floor: Vec<f64>,
}

impl<'a> Builder<'a> {
    fn new(oracle: &'a dyn KernelOracle, r: usize) -> Result<Self> {
        let n = oracle.size();
        if r == 0 || r > n {
            return Err(invalid(format!("rank must be in 1..={n}, got {r}")));
        }
        let d = oracle.diag();
        if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("kernel diagonal must be finite and nonnegative"));
        }
        let floor = d.iter().map(|v| RESIDUAL_FLOOR * v).collect();
        let mut b = Self { oracle, f: DMatrix::zeros(n, r), cols: 0, pivots: Vec::with_capacity(r), d, floor };
        b.clamp();
        Ok(b)
    }

    fn clamp(&mut self) {
        for (d, fl) in self.d.iter_mut().zip(&self.floor) {
            if *d <= *fl {
                *d = 0.0;
            }
        }
    }

    fn residual_total(&self) -> f64 {
        self.d.iter().sum()
    }

    /// Attempts to append the (distinct, sorted) pivots `s`. Returns
    /// `false` without touching the state when `G(S',S')` cannot be
    /// factored even with the fallback jitter.
    fn append(&mut self, s: &[usize]) -> bool {
        let n = self.f.nrows();
        let b = s.len();
        let mut g = self.oracle.block(0..n, s);
        if self.cols > 0 {
            let f = self.f.columns(0, self.cols);
            let fs = DMatrix::from_fn(b, self.cols, |i, j| f[(s[i], j)]);
            g.gemm(-1.0, &f, &fs.transpose(), 1.0);
        }
        let mut gss = DMatrix::from_fn(b, b, |i, j| g[(s[i], j)]);
        symmetrize(&mut gss);
        let l = match gss.clone().cholesky() {
            Some(c) => c.unpack(),
            None => {
                let jitter = 1e-12 * crate::linalg::trace(&gss);
                if !(jitter > 0.0) {
                    return false;
                }
                for i in 0..b {
                    gss[(i, i)] += jitter;
                }
                match gss.cholesky() {
                    Some(c) => c.unpack(),
                    None => return false,
                }
            }
        };
        // New columns G R^{-1} with R = L*, computed as (L^{-1} G*)*.
        let Some(x) = l.solve_lower_triangular(&g.transpose()) else {
            return false;
        };
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        for (c, row) in x.row_iter().enumerate() {
            self.f.column_mut(self.cols + c).tr_copy_from(&row);
        }
        for i in 0..n {
            let mut sq = 0.0;
            for c in 0..b {
                sq += x[(c, i)] * x[(c, i)];
            }
            self.d[i] -= sq;
        }
        for &p in s {
            self.d[p] = 0.0;
        }
        self.clamp();
        self.cols += b;
        self.pivots.extend_from_slice(s);
        true
    }

    fn finish(self) -> PartialCholeskyFactor {
        let f = self.f.columns(0, self.cols).into_owned();
        PartialCholeskyFactor { f, pivots: self.pivots, residual_diag: self.d }
    }
}

/// Blocked randomly pivoted Cholesky. Each block samples `min(B, r - i)`
/// iid indices with probability proportional to the residual diagonal,
/// deduplicates them and advances the counter by the number kept, so the
/// factor may have fewer than `r` columns.
pub fn rpcholesky(oracle: &dyn KernelOracle, r: usize, block: usize, seed: u64) -> Result<PartialCholeskyFactor> {
    if block == 0 {
        return Err(invalid("block size must be at least 1"));
    }
    let mut st = Builder::new(oracle, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut i = 0;
    while i < r {
        if st.residual_total() <= 0.0 {
            break;
        }
        let mut b = block.min(r - i);
        loop {
            let dist = WeightedIndex::new(&st.d).map_err(|e| Error::Numerical(e.to_string()))?;
            let mut s: Vec<usize> = (0..b).map(|_| dist.sample(&mut rng)).collect();
            s.sort_unstable();
            s.dedup();
            if st.append(&s) {
                i += s.len();
                break;
            }
            if s.len() == 1 {
                // A single positive pivot only fails if its residual is pure roundoff.
                st.d[s[0]] = 0.0;
                break;
            }
            b = (b / 2).max(1);
        }
    }
    Ok(st.finish())
}

/// Greedy pivoting: the largest residual diagonal entry (lowest index on ties).
pub fn greedy_cholesky(oracle: &dyn KernelOracle, r: usize) -> Result<PartialCholeskyFactor> {
    let mut st = Builder::new(oracle, r)?;
    while st.cols < r {
        let mut best = 0;
        for (i, &v) in st.d.iter().enumerate() {
            if v > st.d[best] {
                best = i;
            }
        }
        if st.d[best] <= 0.0 {
            break;
        }
        if !st.append(&[best]) {
            st.d[best] = 0.0;
        }
    }
    Ok(st.finish())
}

/// Column Nystrom on `r` pivots drawn uniformly without replacement,
/// computed by partial Cholesky in the sampled order. Pivots whose residual
/// is already exhausted are skipped.
pub fn uniform_nystrom(oracle: &dyn KernelOracle, r: usize, seed: u64) -> Result<PartialCholeskyFactor> {
    let mut st = Builder::new(oracle, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, oracle.size(), r);
    for p in picks.iter() {
        if st.d[p] > 0.0 && !st.append(&[p]) {
            st.d[p] = 0.0;
        }
    }
    Ok(st.finish())
}

pub fn build_factor(oracle: &dyn KernelOracle, r: usize, rule: PivotRule) -> Result<PartialCholeskyFactor> {
    match rule {
        PivotRule::RpCholesky { block, seed } => rpcholesky(oracle, r, block, seed),
        PivotRule::Greedy => greedy_cholesky(oracle, r),
        PivotRule::Uniform { seed } => uniform_nystrom(oracle, r, seed),
    }
}

/// Smallest `r` with `sum_{i > r} lambda_i <= mu` for eigenvalues sorted
/// in descending order.
pub fn tail_rank(eigenvalues: &[f64], mu: f64) -> Result<usize> {
    if !(mu > 0.0) {
        return Err(invalid("mu must be positive"));
    }
    if eigenvalues.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid("eigenvalues must be finite and nonnegative"));
    }
    if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
        return Err(invalid("eigenvalues must be sorted in descending order"));
    }
    // Suffix sums accumulated from the small end to avoid cancellation.
    let mut tail = 0.0;
    let mut rank = eigenvalues.len();
    for (i, v) in eigenvalues.iter().enumerate().rev() {
        tail += v;
        if tail > mu {
            break;
        }
        rank = i;
    }
    Ok(rank)
}

/// Rank sufficient for the conditioning guarantee:
/// `ceil(tail_rank * (1 + ln(tr A / mu)))`, capped at `n`.
pub fn sufficient_rank(tail_rank: usize, trace: f64, mu: f64, n: usize) -> usize {
    let growth = 1.0 + (trace / mu).ln().max(0.0);
    ((tail_rank as f64 * growth).ceil() as usize).min(n)
}

/// `tr(A) - ||F||_F^2`, clamped at zero.
pub fn trace_residual(oracle: &dyn KernelOracle, factor: &PartialCholeskyFactor) -> f64 {
    (oracle.trace() - factor.f.norm_squared()).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ExplicitKernel;
    use crate::linalg::{psd_with_spectrum, symmetric_eigenvalues, trace};
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn diag(values: &[f64]) -> ExplicitKernel {
        ExplicitKernel::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))).unwrap()
    }

    fn random_psd(n: usize, seed: u64) -> ExplicitKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + i as f64).powi(2)).collect();
        ExplicitKernel::new(psd_with_spectrum(&spec, &mut rng)).unwrap()
    }

    fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
        let total: usize = counts.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&c, &p)| {
                let e = p * total as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    fn domination_gap(a: &ExplicitKernel, f: &PartialCholeskyFactor) -> f64 {
        let diff = f.approximation() - a.matrix();
        *symmetric_eigenvalues(&diff).unwrap().last().unwrap()
    }

    #[test]
    fn rank_two_matrix_is_recovered() {
        let u = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 3.0, -1.0]);
        let a = ExplicitKernel::new(&u * u.transpose()).unwrap();
        for f in [rpcholesky(&a, 2, 1, 7).unwrap(), greedy_cholesky(&a, 2).unwrap()] {
            assert!(trace_residual(&a, &f) < 1e-12 * a.trace());
        }
    }

    #[test]
    fn single_nonzero_diagonal_is_forced() {
        let a = diag(&[1.0, 0.0, 0.0]);
        for seed in 0..20 {
            let f = rpcholesky(&a, 1, 1, seed).unwrap();
            assert_eq!(f.pivots, vec![0]);
        }
    }

    #[test]
    fn zero_residual_returns_early() {
        let a = diag(&[1.0, 0.0, 0.0]);
        let f = rpcholesky(&a, 3, 1, 1).unwrap();
        assert_eq!(f.rank(), 1);
        let f = greedy_cholesky(&a, 3).unwrap();
        assert_eq!(f.rank(), 1);
    }

    #[test]
    fn first_pivot_follows_diagonal_law() {
        let a = diag(&[1.0, 2.0, 3.0]);
        let mut counts = [0usize; 3];
        for seed in 0..10_000 {
            counts[rpcholesky(&a, 1, 1, seed).unwrap().pivots[0]] += 1;
        }
        assert!(chi_square_p(&counts, &[1.0 / 6.0, 1.0 / 3.0, 0.5]) > 1e-3, "{counts:?}");
    }

    #[test]
    fn second_pivot_follows_residual_law() {
        // A = [[2,1,0],[1,2,0],[0,0,1]]: after pivot 0 the residual diagonal
        // is (0, 1.5, 1), after pivot 1 it is (1.5, 0, 1), after pivot 2 it is (2, 2, 0).
        let a =
            ExplicitKernel::new(DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let mut pairs = [[0usize; 3]; 3];
        for seed in 0..20_000 {
            let f = rpcholesky(&a, 2, 1, seed).unwrap();
            pairs[f.pivots[0]][f.pivots[1]] += 1;
        }
        let first = [0.4, 0.4, 0.2];
        let cond = [[0.0, 0.6, 0.4], [0.6, 0.0, 0.4], [0.5, 0.5, 0.0]];
        let mut counts = Vec::new();
        let mut probs = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    counts.push(pairs[i][j]);
                    probs.push(first[i] * cond[i][j]);
                }
            }
        }
        assert!(chi_square_p(&counts, &probs) > 1e-3, "{pairs:?}");
    }

    #[test]
    fn greedy_picks_largest_diagonal() {
        assert_eq!(greedy_cholesky(&diag(&[3.0, 1.0, 2.0]), 1).unwrap().pivots, vec![0]);
        assert_eq!(greedy_cholesky(&diag(&[1.0, 2.0, 2.0]), 1).unwrap().pivots, vec![1]);
    }

    #[test]
    fn uniform_full_pivoting_is_exact() {
        let a = random_psd(4, 3);
        let f = uniform_nystrom(&a, 4, 5).unwrap();
        let err = (f.approximation() - a.matrix()).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn uniform_first_pivot_is_uniform() {
        let a = diag(&[1.0, 5.0, 0.1, 2.0]);
        let mut counts = [0usize; 4];
        for seed in 0..10_000 {
            counts[uniform_nystrom(&a, 1, seed).unwrap().pivots[0]] += 1;
        }
        assert!(chi_square_p(&counts, &[0.25; 4]) > 1e-3, "{counts:?}");
    }

    #[test]
    fn nystrom_domination_every_rule() {
        for seed in 0..5 {
            let a = random_psd(50, seed);
            let tol = 1e-10 * a.trace();
            for rule in [
                PivotRule::RpCholesky { block: 1, seed },
                PivotRule::RpCholesky { block: 3, seed },
                PivotRule::RpCholesky { block: 50, seed },
                PivotRule::Greedy,
                PivotRule::Uniform { seed },
            ] {
                for r in [1, 7, 25, 50] {
                    let f = build_factor(&a, r, rule).unwrap();
                    assert!(f.rank() <= r);
                    assert!(domination_gap(&a, &f) <= tol, "{rule:?} r={r}");
                    for &p in &f.pivots {
                        assert_eq!(f.residual_diag[p], 0.0);
                    }
                    assert!(f.residual_diag.iter().all(|&d| d >= 0.0));
                    assert!((trace_residual(&a, &f) - f.residual_trace()).abs() <= 1e-8 * a.trace());
                }
            }
        }
    }

    #[test]
    fn trace_residual_matches_dense() {
        let a = random_psd(30, 8);
        let f = rpcholesky(&a, 10, 1, 2).unwrap();
        let dense = trace(&(a.matrix() - f.approximation()));
        assert_relative_eq!(trace_residual(&a, &f), dense, epsilon = 1e-8 * a.trace());
        let full = rpcholesky(&a, 30, 1, 2).unwrap();
        assert!(trace_residual(&a, &full) < 1e-8 * a.trace());
        let empty = PartialCholeskyFactor { f: DMatrix::zeros(30, 2), pivots: vec![], residual_diag: a.diag() };
        assert_relative_eq!(trace_residual(&a, &empty), a.trace(), epsilon = 1e-14);
    }

    #[test]
    fn block_rpcholesky_counts_unique_pivots() {
        let a = random_psd(40, 4);
        let f = rpcholesky(&a, 20, 40, 9).unwrap();
        let mut sorted = f.pivots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), f.pivots.len());
        assert_eq!(f.rank(), f.pivots.len());
        assert!(f.rank() <= 20);
    }

    #[test]
    fn rpcholesky_is_deterministic() {
        let a = random_psd(40, 4);
        assert_eq!(rpcholesky(&a, 10, 3, 11).unwrap(), rpcholesky(&a, 10, 3, 11).unwrap());
    }

    #[test]
    fn rejects_bad_rank() {
        let a = diag(&[1.0, 1.0]);
        assert!(rpcholesky(&a, 0, 1, 0).is_err());
        assert!(greedy_cholesky(&a, 3).is_err());
        assert!(rpcholesky(&a, 1, 0, 0).is_err());
    }

    #[test]
    fn tail_rank_examples() {
        assert_eq!(tail_rank(&[1.0; 4], 4.0).unwrap(), 0);
        assert_eq!(tail_rank(&[1.0; 4], 1.5).unwrap(), 3);
        assert_eq!(tail_rank(&[1.0; 4], 0.5).unwrap(), 4);
        assert_eq!(tail_rank(&[], 0.5).unwrap(), 0);
        assert!(tail_rank(&[1.0, 2.0], 1.0).is_err());
        assert!(tail_rank(&[1.0, -0.5], 1.0).is_err());
        assert!(tail_rank(&[1.0], 0.0).is_err());
    }

    #[test]
    fn default_block() {
        assert_eq!(default_block_size(1), 1);
        assert_eq!(default_block_size(200), 20);
        assert_eq!(default_block_size(5000), 100);
    }

    #[test]
    fn sufficient_rank_formula() {
        // tail rank 10, tr/mu = e^2 gives 10 * 3 = 30
        assert_eq!(sufficient_rank(10, 2f64.exp(), 1.0, 1000), 30);
        assert_eq!(sufficient_rank(10, 1e30, 1.0, 50), 50);
        assert_eq!(sufficient_rank(0, 10.0, 1.0, 50), 0);
    }

    #[test]
    fn binary_roundtrip() {
        let a = random_psd(25, 1);
        let f = rpcholesky(&a, 6, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("factor.bin");
        f.write_to(&path).unwrap();
        let back = PartialCholeskyFactor::read_from(&path, &a).unwrap();
        assert_eq!(back.f, f.f);
        assert_eq!(back.pivots, f.pivots);
        for (x, y) in back.residual_diag.iter().zip(&f.residual_diag) {
            assert!((x - y).abs() < 1e-12);
        }
        let other = diag(&[1.0; 3]);
        assert!(PartialCholeskyFactor::read_from(&path, &other).is_err());
    }

    #[test]
    fn diagonal_matrix_factor_is_exact_on_pivots() {
        let a = diag(&[4.0, 1.0]);
        let f = greedy_cholesky(&a, 1).unwrap();
        assert_eq!(f.f.column(0), dvector![2.0, 0.0]);
    }
}
