// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorruptedMeans, RunConfig};
use crate::error::{Error, Result};
use crate::model::{logit_difference, ComponentId, HookPoint, HookSet, Interventions, ModelBundle, Replacement, Site};
use crate::task::{TaskDataset, TaskExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPath {
    /// The component's whole output.
    Full,
    /// Only the attention-pattern inputs (queries and keys).
    QkOnly,
    /// Only the value path; the pattern stays as in the receiving run.
    OvOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Clean run with the site replaced by corrupted means.
    AblateWithMeans,
    /// Corrupted run with the site replaced by clean activations.
    PatchCleanIntoCorrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub component: ComponentId,
    /// Token positions to patch; `None` patches every position.
    pub positions: Option<Vec<usize>>,
    pub path: PatchPath,
    pub direction: Direction,
}

impl PatchSpec {
    pub fn new(component: ComponentId, path: PatchPath, direction: Direction) -> Self {
        Self {
            component,
            positions: None,
            path,
            direction,
        }
    }

    pub fn at_positions(mut self, positions: Vec<usize>) -> Self {
        self.positions = Some(positions);
        self
    }

    /// Hooks the patch substitutes.
    pub fn hooks(&self) -> Result<Vec<HookPoint>> {
        let c = self.component;
        match (self.path, c.head) {
            (PatchPath::Full, _) => Ok(vec![c.output_hook()]),
            (PatchPath::QkOnly, Some(h)) => Ok(vec![
                HookPoint::head(c.layer, Site::HeadQ, h),
                HookPoint::head(c.layer, Site::HeadK, h),
            ]),
            (PatchPath::OvOnly, Some(h)) => Ok(vec![HookPoint::head(c.layer, Site::HeadV, h)]),
            (_, None) => Err(Error::InvalidArgument(format!(
                "{c}: QK/OV path restriction applies to attention heads only"
            ))),
        }
    }
}

/// Δℓ of the unpatched receiving run, of the patched run, and their
/// difference. Negative recoveries are kept as they are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub reference_logit_diff: f64,
    pub patched_logit_diff: f64,
    pub recovery: f64,
}

fn replacements(
    hooks: &[HookPoint],
    source: impl Fn(&HookPoint) -> Result<crate::model::Tensor>,
    positions: &Option<Vec<usize>>,
) -> Result<Interventions> {
    let mut iv = Interventions::none();
    for h in hooks {
        let values = source(h)?;
        let r = match positions {
            None => Replacement::all(values),
            Some(ps) => Replacement::at(values, ps.clone()),
        };
        iv.overrides.insert(*h, r);
    }
    Ok(iv)
}

/// Patch the clean activations of `hooks` (at `positions`) into the
/// corrupted run.
pub fn patch_hooks(
    model: &ModelBundle,
    clean: &TaskExample,
    corrupted: &TaskExample,
    hooks: &HookSet,
    positions: Option<Vec<usize>>,
) -> Result<RecoveryRecord> {
    if clean.len() != corrupted.len() {
        return Err(Error::InvalidArgument(format!(
            "clean ({}) and corrupted ({}) prompts differ in length",
            clean.len(),
            corrupted.len()
        )));
    }
    let none = Interventions::none();
    let clean_run = model.forward(&clean.prompt_tokens, hooks, &none)?;
    let list: Vec<HookPoint> = hooks.iter().copied().collect();
    let iv = replacements(&list, |h| clean_run.cache.get(h).cloned(), &positions)?;
    let score = |logits: &[f32]| logit_difference(logits, clean.correct_token, clean.incorrect_token);
    let reference = score(&model.forward(&corrupted.prompt_tokens, &HookSet::new(), &none)?.logits)?;
    let patched = score(&model.forward(&corrupted.prompt_tokens, &HookSet::new(), &iv)?.logits)?;
    Ok(RecoveryRecord {
        reference_logit_diff: reference,
        patched_logit_diff: patched,
        recovery: patched - reference,
    })
}

/// One component×position patch on a single (clean, corrupted) pair.
/// Ablation with means needs `means` covering the patched hooks.
pub fn activation_patch(
    model: &ModelBundle,
    clean: &TaskExample,
    corrupted: &TaskExample,
    spec: &PatchSpec,
    means: Option<&CorruptedMeans>,
) -> Result<RecoveryRecord> {
    spec.component.validate(&model.config)?;
    let hooks = spec.hooks()?;
    match spec.direction {
        Direction::PatchCleanIntoCorrupted => {
            let set: HookSet = hooks.into_iter().collect();
            patch_hooks(model, clean, corrupted, &set, spec.positions.clone())
        }
        Direction::AblateWithMeans => {
            let means = means.ok_or_else(|| {
                Error::InvalidArgument("ablation direction needs corrupted means".into())
            })?;
            let iv = replacements(&hooks, |h| means.get(clean.len(), h).cloned(), &spec.positions)?;
            let none = Interventions::none();
            let score = |logits: &[f32]| logit_difference(logits, clean.correct_token, clean.incorrect_token);
            let reference = score(&model.forward(&clean.prompt_tokens, &HookSet::new(), &none)?.logits)?;
            let patched = score(&model.forward(&clean.prompt_tokens, &HookSet::new(), &iv)?.logits)?;
            Ok(RecoveryRecord {
                reference_logit_diff: reference,
                patched_logit_diff: patched,
                recovery: patched - reference,
            })
        }
    }
}

/// [`activation_patch`] averaged over paired clean/corrupted datasets.
pub fn activation_patch_mean(
    model: &ModelBundle,
    clean: &TaskDataset,
    corrupted: &TaskDataset,
    spec: &PatchSpec,
    means: Option<&CorruptedMeans>,
    run: &RunConfig,
) -> Result<RecoveryRecord> {
    if clean.len() != corrupted.len() {
        return Err(Error::InvalidArgument("clean and corrupted datasets differ in size".into()));
    }
    let idx: Vec<usize> = (0..clean.len()).collect();
    let recs = run.exec.try_map(&idx, |&i| {
        activation_patch(model, &clean.examples[i], &corrupted.examples[i], spec, means)
    })?;
    let n = recs.len() as f64;
    let reference = recs.iter().map(|r| r.reference_logit_diff).sum::<f64>() / n;
    let patched = recs.iter().map(|r| r.patched_logit_diff).sum::<f64>() / n;
    Ok(RecoveryRecord {
        reference_logit_diff: reference,
        patched_logit_diff: patched,
        recovery: patched - reference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRecovery {
    pub component: ComponentId,
    pub recovery: f64,
    /// Recovery divided by its layer's mean recovery; 0 for inert layers.
    pub normalized: f64,
    pub inert_layer: bool,
}

/// Divide each recovery by the mean recovery of its layer.
pub fn layer_normalized_recovery(recoveries: &[(ComponentId, f64)]) -> Vec<NormalizedRecovery> {
    let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (c, r) in recoveries {
        by_layer.entry(c.layer).or_default().push(*r);
    }
    let layer_mean: BTreeMap<usize, f64> = by_layer
        .iter()
        .map(|(l, v)| (*l, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    recoveries
        .iter()
        .map(|(c, r)| {
            let m = layer_mean[&c.layer];
            let inert = m == 0.0;
            NormalizedRecovery {
                component: *c,
                recovery: *r,
                normalized: if inert { 0.0 } else { r / m },
                inert_layer: inert,
            }
        })
        .collect()
}
