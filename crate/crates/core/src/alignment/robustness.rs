// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::component_drops;
use crate::error::{Error, Result};
use crate::intervention::{CorruptedMeans, RunConfig};
use crate::model::{ComponentId, ModelBundle};
use crate::task::TaskDataset;
use crate::tensor_math::{bootstrap_ci, BootstrapSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDrop {
    pub component: ComponentId,
    /// Performance drop in percentage points of the baseline, negatives
    /// clamped to 0.
    pub drop_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub model: String,
    pub base_logit_diff: f64,
    pub drops: Vec<ComponentDrop>,
    pub bootstrap: BootstrapSummary,
    pub n_components: usize,
    pub n_over_10: usize,
    pub n_over_20: usize,
    pub pct_over_10: f64,
    pub pct_over_20: f64,
    pub dataset_hash: String,
}

/// Summary of already computed raw drops `(component, base − ablated)`.
pub fn robustness_from_drops(
    model: &str,
    base: f64,
    drops: &[(ComponentId, f64)],
    dataset_hash: &str,
    n_resamples: usize,
    seed: u64,
) -> Result<RobustnessSummary> {
    if base == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    let drops: Vec<ComponentDrop> = drops
        .iter()
        .map(|&(component, d)| ComponentDrop { component, drop_pct: (100.0 * d / base.abs()).max(0.0) })
        .collect();
    let values: Vec<f64> = drops.iter().map(|d| d.drop_pct).collect();
    let bootstrap = bootstrap_ci(&values, n_resamples, 0.95, seed)?;
    let n = drops.len();
    let n_over_10 = values.iter().filter(|&&v| v > 10.0).count();
    let n_over_20 = values.iter().filter(|&&v| v > 20.0).count();
    Ok(RobustnessSummary {
        model: model.to_string(),
        base_logit_diff: base,
        drops,
        bootstrap,
        n_components: n,
        n_over_10,
        n_over_20,
        pct_over_10: 100.0 * n_over_10 as f64 / n as f64,
        pct_over_20: 100.0 * n_over_20 as f64 / n as f64,
        dataset_hash: dataset_hash.to_string(),
    })
}

/// Mean per-component ablation drop with a 95% percentile-bootstrap CI.
pub fn robustness_summary(
    model: &ModelBundle,
    ds: &TaskDataset,
    means: &CorruptedMeans,
    run: &RunConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<RobustnessSummary> {
    let (base, drops) = component_drops(model, ds, means, run)?;
    robustness_from_drops(&model.name, base, &drops, &ds.content_hash, n_resamples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionPair {
    /// Fraction of teacher parameters removed, in (0, 1).
    pub compression: f64,
    pub teacher_drop: f64,
    pub student_drop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrittlenessRow {
    pub compression: f64,
    /// Student minus teacher mean drop, percentage points.
    pub delta_pp: f64,
    /// `delta_pp / compression`.
    pub beta: f64,
    /// Extra drop per 0.1 of compression.
    pub per_tenth: f64,
}

pub fn compression_brittleness(pairs: &[CompressionPair]) -> Result<Vec<BrittlenessRow>> {
    pairs
        .iter()
        .map(|p| {
            if !(p.compression > 0.0 && p.compression < 1.0) {
                return Err(Error::InvalidArgument(format!("compression must lie in (0, 1), got {}", p.compression)));
            }
            let delta_pp = p.student_drop - p.teacher_drop;
            let beta = delta_pp / p.compression;
            Ok(BrittlenessRow { compression: p.compression, delta_pp, beta, per_tenth: beta / 10.0 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brittleness_hand_values() {
        let rows = compression_brittleness(&[CompressionPair { compression: 0.339, teacher_drop: 3.06, student_drop: 12.24 }]).unwrap();
        let r = rows[0];
        assert!((r.delta_pp - 9.18).abs() < 1e-9);
        assert!((r.beta - 27.079_646_017_699_115).abs() < 1e-9);
        assert!((r.per_tenth - 2.707_964_601_769_911_5).abs() < 1e-9);
        let z = compression_brittleness(&[CompressionPair { compression: 0.5, teacher_drop: 4.0, student_drop: 4.0 }]).unwrap();
        assert_eq!((z[0].delta_pp, z[0].beta), (0.0, 0.0));
        for c in [0.0, 1.0, -0.2, 1.5] {
            assert!(compression_brittleness(&[CompressionPair { compression: c, teacher_drop: 1.0, student_drop: 2.0 }]).is_err());
        }
    }

    #[test]
    fn inert_model_summarizes_to_zero() {
        let drops: Vec<(ComponentId, f64)> = (0..5).map(|h| (ComponentId::head(0, h), 0.0)).collect();
        let s = robustness_from_drops("m", 2.0, &drops, "h", 1000, 0).unwrap();
        assert_eq!((s.bootstrap.mean, s.bootstrap.ci_low, s.bootstrap.ci_high), (0.0, 0.0, 0.0));
        assert_eq!(s.n_over_10, 0);
    }

    #[test]
    fn drops_are_clamped_percentages() {
        let drops = vec![(ComponentId::head(0, 0), 1.0), (ComponentId::head(0, 1), -0.5), (ComponentId::mlp(0), 0.3)];
        let s = robustness_from_drops("m", 2.0, &drops, "h", 100, 0).unwrap();
        let v: Vec<f64> = s.drops.iter().map(|d| d.drop_pct).collect();
        assert_eq!(v, vec![50.0, 0.0, 15.0]);
        assert_eq!((s.n_over_10, s.n_over_20), (2, 1));
    }
}
