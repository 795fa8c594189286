// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::safetensors::{self, StoredTensor};
use crate::model::{sha256_hex, HookPoint, HookSet, Interventions, ModelBundle, Tensor};
use crate::task::TaskDataset;

use super::RunConfig;

const CORRUPTED_STREAM_OFFSET: usize = 1 << 32;

/// Positionwise mean activations over a corrupted dataset, one set per
/// prompt length.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedMeans {
    by_length: BTreeMap<usize, BTreeMap<HookPoint, Tensor>>,
    pub dataset_hash: String,
    pub n_examples: usize,
}

impl CorruptedMeans {
    /// Record `hooks` on every corrupted prompt and average per length group.
    pub fn compute(model: &ModelBundle, corrupted: &TaskDataset, hooks: &HookSet, exec: Exec) -> Result<Self> {
        Self::compute_run(model, corrupted, hooks, &RunConfig::new(exec))
    }

    /// As [`CorruptedMeans::compute`], with the run's noise applied. Noise
    /// streams are offset so corrupted prompt `i` never reuses the stream
    /// of clean prompt `i`.
    pub fn compute_run(model: &ModelBundle, corrupted: &TaskDataset, hooks: &HookSet, run: &RunConfig) -> Result<Self> {
        if hooks.is_empty() {
            return Err(Error::InvalidArgument("no hooks requested for corrupted means".into()));
        }
        let idx: Vec<usize> = (0..corrupted.len()).collect();
        let caches = run.exec.try_map(&idx, |&i| {
            let iv = Interventions::none().with_noise(run.noise_for(CORRUPTED_STREAM_OFFSET + i));
            model.forward(&corrupted.examples[i].prompt_tokens, hooks, &iv).map(|o| o.cache)
        })?;
        let mut by_length = BTreeMap::new();
        for (len, members) in corrupted.length_groups() {
            let mut group = BTreeMap::new();
            for hook in hooks.iter() {
                let first = caches[members[0]].get(hook)?;
                let mut acc = vec![0f64; first.data().len()];
                for &i in &members {
                    for (a, v) in acc.iter_mut().zip(caches[i].get(hook)?.data()) {
                        *a += *v as f64;
                    }
                }
                let n = members.len() as f64;
                let data = acc.into_iter().map(|a| (a / n) as f32).collect();
                group.insert(*hook, Tensor::new(first.rows(), first.cols(), data)?);
            }
            by_length.insert(len, group);
        }
        Ok(Self {
            by_length,
            dataset_hash: corrupted.content_hash.clone(),
            n_examples: corrupted.len(),
        })
    }

    /// As [`CorruptedMeans::compute_run`], reusing a spilled copy under
    /// `cache_dir` when one exists for the same model, dataset and hooks.
    /// Noisy runs are never cached.
    pub fn compute_cached(
        model: &ModelBundle,
        corrupted: &TaskDataset,
        hooks: &HookSet,
        run: &RunConfig,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let dir = match cache_dir {
            Some(d) if run.noise_for(0).is_none() => d,
            _ => return Self::compute_run(model, corrupted, hooks, run),
        };
        let path = Self::cache_path(dir, model, corrupted, hooks);
        if let Ok(bytes) = std::fs::read(&path) {
            match safetensors::read(&bytes).and_then(|t| Self::from_tensors(t, corrupted)) {
                Ok(means) => return Ok(means),
                Err(e) => log::warn!("ignoring unreadable mean cache {}: {e}", path.display()),
            }
        }
        let means = Self::compute_run(model, corrupted, hooks, run)?;
        std::fs::create_dir_all(dir)?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, safetensors::write(&means.to_tensors())?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(means)
    }

    fn cache_path(dir: &Path, model: &ModelBundle, corrupted: &TaskDataset, hooks: &HookSet) -> PathBuf {
        let names: Vec<String> = hooks.iter().map(|h| h.to_string()).collect();
        let hook_digest = sha256_hex(names.join(",").as_bytes());
        let short = |s: &str| s.chars().take(16).collect::<String>();
        dir.join(format!(
            "means-{}-{}-{}.safetensors",
            short(&model.digest),
            short(&corrupted.content_hash),
            short(&hook_digest)
        ))
    }

    /// Flatten into named tensors `len<L>/<hook>`.
    pub fn to_tensors(&self) -> BTreeMap<String, StoredTensor> {
        let mut out = BTreeMap::new();
        for (len, group) in &self.by_length {
            for (hook, t) in group {
                out.insert(format!("len{len}/{hook}"), StoredTensor::new(vec![t.rows(), t.cols()], t.data().to_vec()));
            }
        }
        out
    }

    /// Inverse of [`CorruptedMeans::to_tensors`]; every length group of
    /// `corrupted` must be present.
    pub fn from_tensors(tensors: BTreeMap<String, StoredTensor>, corrupted: &TaskDataset) -> Result<Self> {
        let mut by_length: BTreeMap<usize, BTreeMap<HookPoint, Tensor>> = BTreeMap::new();
        for (name, st) in tensors {
            let bad = || Error::Tensor { name: name.clone(), reason: "expected `len<L>/<hook>` of rank 2".into() };
            let (len, hook) = name.split_once('/').ok_or_else(bad)?;
            let len: usize = len.strip_prefix("len").and_then(|l| l.parse().ok()).ok_or_else(bad)?;
            let hook: HookPoint = hook.parse()?;
            let [rows, cols] = st.shape[..] else { return Err(bad()) };
            by_length.entry(len).or_default().insert(hook, Tensor::new(rows, cols, st.data)?);
        }
        if let Some(len) = corrupted.length_groups().keys().find(|l| !by_length.contains_key(l)) {
            return Err(Error::CacheMiss(format!("cached means lack prompts of length {len}")));
        }
        Ok(Self {
            by_length,
            dataset_hash: corrupted.content_hash.clone(),
            n_examples: corrupted.len(),
        })
    }

    /// Mean tensor of `hook` for prompts of length `len`.
    pub fn get(&self, len: usize, hook: &HookPoint) -> Result<&Tensor> {
        let group = self.by_length.get(&len).ok_or_else(|| {
            Error::InvalidArgument(format!("no corrupted prompts of length {len} to take means over"))
        })?;
        group
            .get(hook)
            .ok_or_else(|| Error::CacheMiss(format!("{hook} (corrupted means)")))
    }

    pub fn lengths(&self) -> impl Iterator<Item = &usize> {
        self.by_length.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{corrupt_dataset, gen_numeral_sequences};
    use crate::toy::{build_model, IdleStyle, PlantedSpec};

    #[test]
    fn spilled_means_reload_bit_for_bit() {
        let model = build_model(&PlantedSpec::student(IdleStyle::Base)).unwrap();
        let ds = gen_numeral_sequences(12, 3, &model.tokenizer).unwrap();
        let cd = corrupt_dataset(&ds, &model.tokenizer, 4).unwrap();
        let hooks = HookSet::component_outputs(&model.config);
        let dir = tempfile::tempdir().unwrap();
        let run = RunConfig::default();
        let first = CorruptedMeans::compute_cached(&model, &cd, &hooks, &run, Some(dir.path())).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = CorruptedMeans::compute_cached(&model, &cd, &hooks, &run, Some(dir.path())).unwrap();
        assert_eq!(first, second);
        assert_eq!(first, CorruptedMeans::compute_run(&model, &cd, &hooks, &run).unwrap());

        let spilled = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
        std::fs::write(&spilled, b"not a tensor file").unwrap();
        let recovered = CorruptedMeans::compute_cached(&model, &cd, &hooks, &run, Some(dir.path())).unwrap();
        assert_eq!(recovered, first);
        assert!(safetensors::read(&std::fs::read(&spilled).unwrap()).is_ok());
    }
}
