// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{AlignOptions, AlignmentInputs, ModelSide};
use crate::error::{Error, Result};
use crate::intervention::{NoiseConfig, RunConfig};
use crate::model::ModelBundle;
use crate::task::TaskDataset;
use crate::tensor_math::{mean, spearman, std_dev};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub mean_score: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_score: f64,
    pub per_seed: Vec<f64>,
    /// Seeds whose noisy student had no positive ablation drop; they
    /// score 0.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurve {
    pub teacher: String,
    pub student: String,
    pub options: AlignOptions,
    pub seeds: Vec<u64>,
    pub noiseless_score: f64,
    pub points: Vec<NoisePoint>,
    /// Mean score over the last quarter of the grid.
    pub plateau_level: f64,
    /// First σ whose mean score is within 10% of the total descent from
    /// the plateau level.
    pub plateau_sigma: f64,
    /// Spearman ρ(σ, mean score) over σ ≤ plateau σ; `None` with fewer
    /// than three points.
    pub spearman_pre_plateau: Option<f64>,
    pub n_pre_plateau: usize,
    pub dataset_hash: String,
}

/// The σ grid `0, step, 2·step, …, max` (inclusive, rounded to the step).
pub fn sigma_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || max < 0.0 {
        return Err(Error::InvalidArgument("σ grid needs a positive step and non-negative max".into()));
    }
    let n = (max / step).round() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

/// Plateau level, plateau index and pre-plateau Spearman ρ of a curve.
pub fn plateau_analysis(sigmas: &[f64], scores: &[f64]) -> (f64, usize, Option<f64>) {
    let n = scores.len();
    let tail = (n / 4).max(1);
    let level = mean(&scores[n - tail..]);
    let range = scores[0] - level;
    let idx = if range > 0.0 {
        scores.iter().position(|s| s - level <= 0.1 * range).unwrap_or(n - 1)
    } else {
        0
    };
    let rho = (idx >= 2).then(|| spearman(&sigmas[..=idx], &scores[..=idx]));
    (level, idx, rho)
}

/// Add zero-mean Gaussian noise of each σ to every student component
/// output (for influence, means and similarity alike), recompute the full
/// metric per seed, and summarize.
#[allow(clippy::too_many_arguments)]
pub fn noise_injection_experiment(
    teacher: &ModelBundle,
    student: &ModelBundle,
    ds: &TaskDataset,
    corrupted: &TaskDataset,
    sigmas: &[f64],
    seeds: &[u64],
    opts: &AlignOptions,
    run: &RunConfig,
) -> Result<NoiseCurve> {
    if sigmas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("noise sweep needs at least one σ and one seed".into()));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) || sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("σ grid must be non-negative and strictly ascending".into()));
    }
    let clean = RunConfig::new(run.exec);
    let t_side = ModelSide::compute(teacher, ds, corrupted, opts.head_site, &clean)?;
    let noiseless = {
        let s_side = ModelSide::compute(student, ds, corrupted, opts.head_site, &clean)?;
        AlignmentInputs::new(t_side.clone(), s_side, &clean)?
            .report(opts.normalization, opts.strategy, opts.top_k)?
            .score
    };
    let jobs: Vec<(f64, u64)> = sigmas.iter().flat_map(|&s| seeds.iter().map(move |&k| (s, k))).collect();
    let scores = run.exec.try_map(&jobs, |&(sigma, seed)| {
        let noisy = clean.with_noise(Some(NoiseConfig { sigma, seed }));
        let s_side = ModelSide::compute(student, ds, corrupted, opts.head_site, &noisy)?;
        match AlignmentInputs::new(t_side.clone(), s_side, &clean)?.report(opts.normalization, opts.strategy, opts.top_k) {
            Ok(r) => Ok((r.score, false)),
            Err(Error::DegenerateInfluence) => Ok((0.0, true)),
            Err(e) => Err(e),
        }
    })?;
    let points: Vec<NoisePoint> = sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let chunk = &scores[i * seeds.len()..(i + 1) * seeds.len()];
            let per_seed: Vec<f64> = chunk.iter().map(|x| x.0).collect();
            NoisePoint {
                sigma,
                mean_score: mean(&per_seed),
                std_score: if per_seed.len() > 1 { std_dev(&per_seed) } else { 0.0 },
                degenerate: chunk.iter().filter(|x| x.1).count(),
                per_seed,
            }
        })
        .collect();
    let curve: Vec<f64> = points.iter().map(|p| p.mean_score).collect();
    let (plateau_level, idx, rho) = plateau_analysis(sigmas, &curve);
    Ok(NoiseCurve {
        teacher: teacher.name.clone(),
        student: student.name.clone(),
        options: *opts,
        seeds: seeds.to_vec(),
        noiseless_score: noiseless,
        points,
        plateau_level,
        plateau_sigma: sigmas[idx],
        spearman_pre_plateau: rho,
        n_pre_plateau: idx + 1,
        dataset_hash: ds.content_hash.clone(),
    })
}

impl NoiseCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,mean_A,std_A,degenerate\n");
        for p in &self.points {
            s.push_str(&format!("{},{:.9},{:.9},{}\n", p.sigma, p.mean_score, p.std_score, p.degenerate));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_forty_one_points() {
        let g = sigma_grid(2.0, 0.05).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 0.0);
        assert!((g[40] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn plateau_of_a_decaying_curve() {
        let sigmas: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let scores: Vec<f64> = sigmas.iter().map(|s| 0.2 + 0.8 * (-3.0 * s).exp()).collect();
        let (level, idx, rho) = plateau_analysis(&sigmas, &scores);
        assert!((level - 0.2).abs() < 0.01);
        assert!(idx > 3 && idx < 15, "{idx}");
        assert_eq!(rho, Some(-1.0));
    }

    #[test]
    fn flat_curve_has_no_pre_plateau_region() {
        let (_, idx, rho) = plateau_analysis(&[0.0, 0.1, 0.2, 0.3], &[0.5; 4]);
        assert_eq!(idx, 0);
        assert_eq!(rho, None);
    }
}
