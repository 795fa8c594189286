// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal interventions: mean ablation, activation patching with QK/OV
//! path restriction, and edge-level path patching.
//!
//! Every result is defined one example at a time; batching only changes
//! scheduling, never values.

mod edge;
mod means;
mod patch;

use serde::{Deserialize, Serialize};

pub use edge::{
    clean_caches, edge_interventions, path_patch_edge, path_patch_edges, EdgeId, EdgeSlot, EdgeSrc, EdgeDst,
    edge_source_hooks,
};
pub use means::CorruptedMeans;
pub use patch::{
    activation_patch, activation_patch_mean, layer_normalized_recovery, patch_hooks, Direction, NormalizedRecovery,
    PatchPath, PatchSpec, RecoveryRecord,
};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{logit_difference, ComponentId, HookSet, Interventions, ModelBundle, NoiseSpec, Replacement};
use crate::task::{TaskDataset, TaskExample};

/// Gaussian noise applied to component outputs of every forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

/// Execution settings shared by all dataset-level interventions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunConfig {
    pub exec: Exec,
    pub noise: Option<NoiseConfig>,
}

impl RunConfig {
    pub fn new(exec: Exec) -> Self {
        Self { exec, noise: None }
    }

    pub fn with_noise(mut self, noise: Option<NoiseConfig>) -> Self {
        self.noise = noise;
        self
    }

    /// Per-example noise stream; σ = 0 disables noise entirely.
    pub fn noise_for(&self, example: usize) -> Option<NoiseSpec> {
        self.noise.filter(|n| n.sigma > 0.0).map(|n| NoiseSpec {
            sigma: n.sigma,
            seed: n.seed,
            example: example as u64,
        })
    }
}

/// Per-example logit differences and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub per_example: Vec<f64>,
    pub mean: f64,
}

impl ScoreSummary {
    pub fn from_scores(per_example: Vec<f64>) -> Self {
        let mean = crate::tensor_math::mean(&per_example);
        Self { per_example, mean }
    }
}

/// Mean Δℓ under interventions built per example by `build`.
pub fn evaluate<F>(model: &ModelBundle, ds: &TaskDataset, run: &RunConfig, build: F) -> Result<ScoreSummary>
where
    F: Fn(usize, &TaskExample) -> Result<Interventions> + Sync + Send,
{
    let idx: Vec<usize> = (0..ds.len()).collect();
    let hooks = HookSet::new();
    let scores = run.exec.try_map(&idx, |&i| {
        let e = &ds.examples[i];
        let iv = build(i, e)?.with_noise(run.noise_for(i));
        let out = model.forward(&e.prompt_tokens, &hooks, &iv)?;
        logit_difference(&out.logits, e.correct_token, e.incorrect_token)
    })?;
    Ok(ScoreSummary::from_scores(scores))
}

/// Unablated mean Δℓ.
pub fn baseline(model: &ModelBundle, ds: &TaskDataset, run: &RunConfig) -> Result<ScoreSummary> {
    evaluate(model, ds, run, |_, _| Ok(Interventions::none()))
}

/// Interventions replacing each component's output by its corrupted mean
/// at every position.
pub fn ablation_interventions(components: &[ComponentId], means: &CorruptedMeans, len: usize) -> Result<Interventions> {
    let mut iv = Interventions::none();
    for c in components {
        let hook = c.output_hook();
        iv.overrides.insert(hook, Replacement::all(means.get(len, &hook)?.clone()));
    }
    Ok(iv)
}

/// Mean-ablate `components` jointly and score the dataset.
pub fn ablate_set_and_score(
    model: &ModelBundle,
    ds: &TaskDataset,
    components: &[ComponentId],
    means: &CorruptedMeans,
    run: &RunConfig,
) -> Result<ScoreSummary> {
    for c in components {
        c.validate(&model.config)?;
    }
    evaluate(model, ds, run, |_, e| ablation_interventions(components, means, e.len()))
}

/// Mean-ablate one component and score the dataset.
pub fn ablate_and_score(
    model: &ModelBundle,
    ds: &TaskDataset,
    component: ComponentId,
    means: &CorruptedMeans,
    run: &RunConfig,
) -> Result<ScoreSummary> {
    ablate_set_and_score(model, ds, &[component], means, run)
}

/// Percent change of the mean logit difference relative to |base|.
pub fn perf_change_pct(ablated: f64, base: f64) -> Result<f64> {
    if base == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok(100.0 * (ablated - base) / base.abs())
}

/// Serialized result of one ablation or edge intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub target: String,
    pub mean_logit_diff: f64,
    pub perf_change_pct: f64,
    pub n: usize,
    pub dataset_hash: String,
}

impl InterventionRecord {
    pub fn new(target: impl Into<String>, scores: &ScoreSummary, base: f64, dataset_hash: &str) -> Result<Self> {
        Ok(Self {
            target: target.into(),
            mean_logit_diff: scores.mean,
            perf_change_pct: perf_change_pct(scores.mean, base)?,
            n: scores.per_example.len(),
            dataset_hash: dataset_hash.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perf_change_matches_hand_values() {
        assert_eq!(perf_change_pct(3.0, 3.0).unwrap(), 0.0);
        assert!((perf_change_pct(-0.28, 6.12).unwrap() - (-104.575_163_398_692_8)).abs() < 1e-9);
        assert_eq!(perf_change_pct(2.0, 4.0).unwrap(), -50.0);
        // Sign is carried by the numerator when the base is negative.
        assert_eq!(perf_change_pct(-3.0, -2.0).unwrap(), -50.0);
        assert!(matches!(perf_change_pct(1.0, 0.0), Err(Error::UndefinedBaseline)));
    }
}
