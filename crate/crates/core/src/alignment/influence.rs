// SPDX-License-Identifier: MIT OR Apache-2.0

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{ablate_and_score, baseline, CorruptedMeans, RunConfig};
use crate::model::{ComponentId, ModelBundle};
use crate::task::TaskDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Max,
    L1,
    L2,
}

impl Normalization {
    pub const ALL: [Normalization; 3] = [Normalization::Max, Normalization::L1, Normalization::L2];

    pub fn name(self) -> &'static str {
        match self {
            Normalization::Max => "max",
            Normalization::L1 => "l1",
            Normalization::L2 => "l2",
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Normalization::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown normalization `{s}` (max, l1, l2)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub component: ComponentId,
    /// Baseline Δℓ minus Δℓ with the component mean-ablated.
    pub raw_drop: f64,
    pub clamped_drop: f64,
    pub influence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceTable {
    pub model: String,
    pub normalization: Normalization,
    pub base_logit_diff: f64,
    pub entries: Vec<InfluenceEntry>,
    pub dataset_hash: String,
}

impl InfluenceTable {
    /// Normalize raw drops: negatives clamp to 0, then divide by the max,
    /// the sum, or the Euclidean norm of the clamped drops.
    pub fn from_drops(
        model: &str,
        base_logit_diff: f64,
        drops: &[(ComponentId, f64)],
        normalization: Normalization,
        dataset_hash: &str,
    ) -> Result<Self> {
        let clamped: Vec<f64> = drops.iter().map(|(_, d)| d.max(0.0)).collect();
        let scale = match normalization {
            Normalization::Max => clamped.iter().cloned().fold(0.0, f64::max),
            Normalization::L1 => clamped.iter().sum(),
            Normalization::L2 => clamped.iter().map(|d| d * d).sum::<f64>().sqrt(),
        };
        if !(scale > 0.0) {
            return Err(Error::DegenerateInfluence);
        }
        let entries = drops
            .iter()
            .zip(&clamped)
            .map(|(&(component, raw_drop), &clamped_drop)| InfluenceEntry {
                component,
                raw_drop,
                clamped_drop,
                influence: clamped_drop / scale,
            })
            .collect();
        Ok(Self {
            model: model.to_string(),
            normalization,
            base_logit_diff,
            entries,
            dataset_hash: dataset_hash.to_string(),
        })
    }

    /// Same drops under another normalization.
    pub fn renormalized(&self, normalization: Normalization) -> Result<Self> {
        let drops: Vec<(ComponentId, f64)> = self.entries.iter().map(|e| (e.component, e.raw_drop)).collect();
        Self::from_drops(&self.model, self.base_logit_diff, &drops, normalization, &self.dataset_hash)
    }

    pub fn get(&self, c: ComponentId) -> Option<f64> {
        self.entries.iter().find(|e| e.component == c).map(|e| e.influence)
    }

    pub fn components(&self) -> impl Iterator<Item = ComponentId> + '_ {
        self.entries.iter().map(|e| e.component)
    }

    /// The `k` most influential components, ties to canonical order.
    pub fn top(&self, k: usize) -> Vec<ComponentId> {
        let mut v: Vec<&InfluenceEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.influence.total_cmp(&a.influence).then(a.component.cmp(&b.component)));
        v.into_iter().take(k).map(|e| e.component).collect()
    }
}

/// Raw ablation drop of every component: `(component, base − ablated)`.
pub fn component_drops(
    model: &ModelBundle,
    ds: &TaskDataset,
    means: &CorruptedMeans,
    run: &RunConfig,
) -> Result<(f64, Vec<(ComponentId, f64)>)> {
    let base = baseline(model, ds, run)?.mean;
    let comps = ComponentId::all(&model.config);
    let drops = run
        .exec
        .try_map(&comps, |&c| Ok::<_, Error>((c, base - ablate_and_score(model, ds, c, means, run)?.mean)))?;
    Ok((base, drops))
}

/// Influence of every component of `model` on the task.
pub fn influence_scores(
    model: &ModelBundle,
    ds: &TaskDataset,
    means: &CorruptedMeans,
    normalization: Normalization,
    run: &RunConfig,
) -> Result<InfluenceTable> {
    let (base, drops) = component_drops(model, ds, means, run)?;
    InfluenceTable::from_drops(&model.name, base, &drops, normalization, &ds.content_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn comps(n: usize) -> Vec<ComponentId> {
        (0..n).map(|h| ComponentId::head(0, h)).collect()
    }

    fn table(drops: &[f64], norm: Normalization) -> Result<InfluenceTable> {
        let d: Vec<(ComponentId, f64)> = comps(drops.len()).into_iter().zip(drops.iter().cloned()).collect();
        InfluenceTable::from_drops("m", 1.0, &d, norm, "h")
    }

    #[test]
    fn hand_values_under_max() {
        let t = table(&[2.0, 1.0, 0.0], Normalization::Max).unwrap();
        let i: Vec<f64> = t.entries.iter().map(|e| e.influence).collect();
        assert_eq!(i, vec![1.0, 0.5, 0.0]);
        let t = table(&[2.0, -0.5], Normalization::Max).unwrap();
        assert_eq!(t.entries[1].influence, 0.0);
        assert_eq!(t.entries[1].raw_drop, -0.5);
    }

    #[test]
    fn all_nonpositive_drops_are_degenerate() {
        for norm in Normalization::ALL {
            assert!(matches!(table(&[0.0, -1.0], norm), Err(Error::DegenerateInfluence)));
        }
    }

    #[test]
    fn top_k_breaks_ties_canonically() {
        let t = table(&[1.0, 3.0, 3.0, 0.5], Normalization::Max).unwrap();
        assert_eq!(t.top(2), vec![ComponentId::head(0, 1), ComponentId::head(0, 2)]);
    }

    proptest! {
        #[test]
        fn norms_hold(drops in proptest::collection::vec(-1.0f64..5.0, 1..20)) {
            prop_assume!(drops.iter().any(|d| *d > 1e-6));
            let m = table(&drops, Normalization::Max).unwrap();
            let max = m.entries.iter().map(|e| e.influence).fold(0.0, f64::max);
            prop_assert_eq!(max, 1.0);
            prop_assert!(m.entries.iter().all(|e| (0.0..=1.0).contains(&e.influence)));
            let l1 = table(&drops, Normalization::L1).unwrap();
            prop_assert!((l1.entries.iter().map(|e| e.influence).sum::<f64>() - 1.0).abs() < 1e-9);
            let l2 = table(&drops, Normalization::L2).unwrap();
            prop_assert!((l2.entries.iter().map(|e| e.influence.powi(2)).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn max_normalization_ignores_power_of_two_scaling(
            drops in proptest::collection::vec(0.0f64..5.0, 1..20),
            k in -10i32..10,
        ) {
            prop_assume!(drops.iter().any(|d| *d > 1e-6));
            let scaled: Vec<f64> = drops.iter().map(|d| d * 2f64.powi(k)).collect();
            let a = table(&drops, Normalization::Max).unwrap();
            let b = table(&scaled, Normalization::Max).unwrap();
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(x.influence, y.influence);
            }
        }
    }
}
