// SPDX-License-Identifier: MIT OR Apache-2.0

use super::forward::ActivationCache;
use super::hooks::{ComponentId, HookPoint, Site};
use super::ModelBundle;
use crate::error::{Error, Result};
use crate::tensor_math::Matrix;

/// ℓ_correct − ℓ_incorrect.
pub fn logit_difference(logits: &[f32], correct: u32, incorrect: u32) -> Result<f64> {
    let get = |id: u32| {
        logits
            .get(id as usize)
            .map(|&v| v as f64)
            .ok_or_else(|| Error::InvalidArgument(format!("token id {id} >= logit width {}", logits.len())))
    };
    Ok(get(correct)? - get(incorrect)?)
}

/// Top-`k` (token, logit) pairs of `logits`, descending, ties broken by
/// lower token id.
pub fn top_k(logits: &[f32], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    idx.into_iter()
        .take(k)
        .map(|t| (t, logits[t as usize] as f64))
        .collect()
}

/// Project `resid_post` at (layer, position) through the final layernorm
/// and unembedding. Needs the `L{layer}.resid_post` hook in the cache.
pub fn logit_lens(
    model: &ModelBundle,
    cache: &ActivationCache,
    layer: usize,
    position: usize,
    k: usize,
) -> Result<Vec<(u32, f64)>> {
    if layer >= model.config.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    if position >= cache.prompt_len() {
        return Err(Error::InvalidArgument(format!(
            "position {position} beyond prompt length {}",
            cache.prompt_len()
        )));
    }
    let resid = cache.get(&HookPoint::new(layer, Site::ResidPost))?;
    Ok(top_k(&model.unembed_residual(resid.row(position)), k))
}

/// Post-softmax attention pattern (queries × keys) of one head.
pub fn qk_attention_matrix(cache: &ActivationCache, component: ComponentId) -> Result<Matrix> {
    let head = match (component.is_head(), component.head) {
        (true, Some(h)) => h,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{component} is not an attention head"
            )))
        }
    };
    cache
        .get(&HookPoint::head(component.layer, Site::HeadPattern, head))?
        .to_matrix()
}
