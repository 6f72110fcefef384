//! Synthetic datasets and psd matrices with prescribed spectra, used by the
//! diagnostics, tests and the harness.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::kernel::{standardize, Dataset};
use crate::linalg::psd_with_spectrum;

/// Eigenvalue profiles, normalized so that the largest eigenvalue is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spectrum {
    /// `ratio^i` for i = 1..=n.
    Geometric { ratio: f64 },
    /// `i^-exponent`.
    Power { exponent: f64 },
    /// `count` unit eigenvalues followed by a flat floor at `level`.
    Spiked { count: usize, level: f64 },
    /// `rank` unit eigenvalues, the rest zero.
    LowRank { rank: usize },
}

impl Spectrum {
    /// The first `n` eigenvalues in descending order.
    pub fn values(&self, n: usize) -> Vec<f64> {
        (1..=n)
            .map(|i| match *self {
                Spectrum::Geometric { ratio } => ratio.powi(i as i32),
                Spectrum::Power { exponent } => (i as f64).powf(-exponent),
                Spectrum::Spiked { count, level } => {
                    if i <= count {
                        1.0
                    } else {
                        level
                    }
                }
                Spectrum::LowRank { rank } => {
                    if i <= rank {
                        1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect()
    }

    /// `Q diag(values) Q*` with a Haar-random `Q` drawn from `seed`.
    pub fn matrix(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        psd_with_spectrum(&self.values(n), &mut rng)
    }
}

fn normal_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, center: &[f64], scale: f64, out: &mut Vec<f64>) {
    for _ in 0..n {
        for c in center.iter().take(dim) {
            let z: f64 = rng.sample(StandardNormal);
            out.push(c + scale * z);
        }
    }
}

fn smooth_targets(data: &Dataset, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    (0..data.len())
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            data.row(i).iter().sum::<f64>().sin() + noise * z
        })
        .collect()
}

/// Standard Gaussian features with targets `sin(sum x) + 0.1 noise`.
pub fn gaussian_dataset(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * dim);
    normal_rows(&mut rng, n, dim, &vec![0.0; dim], 1.0, &mut features);
    let data = Dataset::new(dim, features, None).expect("finite features");
    let y = smooth_targets(&data, &mut rng, 0.1);
    data.with_targets(y).expect("matching length")
}

/// Shape of [`clustered_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterDesign {
    pub n: usize,
    pub dim: usize,
    /// Fraction of points in a tight satellite cluster.
    pub satellite_fraction: f64,
    /// Scale of the satellite cluster center.
    pub satellite_offset: f64,
    pub satellite_spread: f64,
    /// Points drawn uniformly from `[-outlier_range, outlier_range]^dim`.
    pub outliers: usize,
    pub outlier_range: f64,
    pub noise: f64,
}

impl ClusterDesign {
    pub fn new(n: usize, dim: usize) -> Self {
        Self {
            n,
            dim,
            satellite_fraction: 0.04,
            satellite_offset: 4.0,
            satellite_spread: 0.2,
            outliers: (0.016 * n as f64).round() as usize,
            outlier_range: 12.0,
            noise: 0.1,
        }
    }
}

/// A dense Gaussian bulk, a small tight satellite cluster and a sprinkle of
/// far outliers, standardized, with targets `sin(sum x) + noise`. The
/// uneven density is what separates the pivot rules: uniform sampling
/// rarely visits the satellite or the outliers, while greedy pivoting
/// spends its budget on the outliers one at a time.
pub fn clustered_dataset(design: &ClusterDesign, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = design.dim;
    let n_small = (design.satellite_fraction * design.n as f64) as usize;
    let n_out = design.outliers.min(design.n - n_small);
    let n_main = design.n - n_small - n_out;
    let mut features = Vec::with_capacity(design.n * dim);
    normal_rows(&mut rng, n_main, dim, &vec![0.0; dim], 1.0, &mut features);
    let center: Vec<f64> = (0..dim).map(|_| design.satellite_offset * rng.sample::<f64, _>(StandardNormal)).collect();
    normal_rows(&mut rng, n_small, dim, &center, design.satellite_spread, &mut features);
    for _ in 0..n_out * dim {
        features.push(rng.random_range(-design.outlier_range..design.outlier_range));
    }
    let raw = Dataset::new(dim, features, None).expect("finite features");
    let data = standardize(&raw).expect("at least two rows");
    let y = smooth_targets(&data, &mut rng, design.noise);
    data.with_targets(y).expect("matching length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_values() {
        assert_eq!(Spectrum::Geometric { ratio: 0.5 }.values(3), vec![0.5, 0.25, 0.125]);
        assert_eq!(Spectrum::Power { exponent: 2.0 }.values(2), vec![1.0, 0.25]);
        assert_eq!(Spectrum::Spiked { count: 1, level: 0.1 }.values(3), vec![1.0, 0.1, 0.1]);
        assert_eq!(Spectrum::LowRank { rank: 2 }.values(3), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn clustered_dataset_is_standardized_and_reproducible() {
        let design = ClusterDesign::new(500, 4);
        let a = clustered_dataset(&design, 3);
        assert_eq!(a, clustered_dataset(&design, 3));
        assert_eq!(a.len(), 500);
        assert_eq!(a.targets().unwrap().len(), 500);
        let mean: f64 = (0..500).map(|i| a.row(i)[0]).sum::<f64>() / 500.0;
        assert!(mean.abs() < 1e-12);
    }
}
