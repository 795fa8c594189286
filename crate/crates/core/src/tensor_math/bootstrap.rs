// SPDX-License-Identifier: MIT OR Apache-2.0

//! Percentile bootstrap of the sample mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub level: f64,
}

impl BootstrapSummary {
    pub fn overlaps(&self, other: &BootstrapSummary) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap CI of the mean of `samples`.
///
/// Each resample draws `samples.len()` indices uniformly with replacement
/// from a ChaCha8 stream seeded with `seed`. The interval endpoints are the
/// `(1 - level) / 2` and `(1 + level) / 2` quantiles of the resampled means,
/// widened if needed so the point estimate lies inside.
pub fn bootstrap_ci(samples: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<BootstrapSummary> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("bootstrap of empty sample".into()));
    }
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("n_resamples must be >= 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must be in (0, 1), got {level}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite bootstrap sample".into()));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let ci_low = quantile_sorted(&means, alpha).min(mean);
    let ci_high = quantile_sorted(&means, 1.0 - alpha).max(mean);
    Ok(BootstrapSummary {
        mean,
        ci_low,
        ci_high,
        n_resamples,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sample_collapses() {
        let s = bootstrap_ci(&[2.5; 17], 1000, 0.95, 1).unwrap();
        assert_eq!((s.mean, s.ci_low, s.ci_high), (2.5, 2.5, 2.5));
    }

    /// Re-draws the same index stream, then picks order statistics by counting
    /// how many resampled means fall at or below each candidate.
    #[test]
    fn matches_exhaustive_percentile_oracle() {
        let samples: Vec<f64> = (1..=10).map(f64::from).collect();
        let (b, seed) = (200, 42);
        let got = bootstrap_ci(&samples, b, 0.95, seed).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<f64> = (0..b)
            .map(|_| {
                let idx: Vec<usize> = (0..10).map(|_| rng.random_range(0..10)).collect();
                idx.iter().map(|&i| samples[i]).sum::<f64>() / 10.0
            })
            .collect();
        let order_stat = |r: usize| -> f64 {
            *means
                .iter()
                .find(|&&m| {
                    let below = means.iter().filter(|&&x| x < m).count();
                    let at_or_below = means.iter().filter(|&&x| x <= m).count();
                    below <= r && r < at_or_below
                })
                .unwrap()
        };
        let q = |p: f64| {
            let h = (b - 1) as f64 * p;
            let lo = h.floor() as usize;
            order_stat(lo) + (h - lo as f64) * (order_stat(lo + 1) - order_stat(lo))
        };
        assert!((got.ci_low - q(0.025)).abs() < 1e-12);
        assert!((got.ci_high - q(0.975)).abs() < 1e-12);
        assert!((got.mean - 5.5).abs() < 1e-12);
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let xs = [0.3, 1.7, -2.0, 4.4, 0.0, 9.1];
        let a = bootstrap_ci(&xs, 5000, 0.95, 9).unwrap();
        let b = bootstrap_ci(&xs, 5000, 0.95, 9).unwrap();
        assert_eq!(a.ci_low.to_bits(), b.ci_low.to_bits());
        assert_eq!(a.ci_high.to_bits(), b.ci_high.to_bits());
        assert!(a.ci_low <= a.mean && a.mean <= a.ci_high);
    }

    #[test]
    fn empty_sample_is_rejected() {
        assert!(bootstrap_ci(&[], 100, 0.95, 0).is_err());
    }
}
