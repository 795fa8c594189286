// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT2-family weight store and the tensor-name manifest enforced at load.

use std::collections::BTreeMap;

use super::safetensors::StoredTensor;
use super::ModelConfig;
use crate::error::{Error, Result};

/// Weights of one transformer block. Projection matrices use the
/// (in × out) row-major layout of the hub's GPT2 checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// d_model × 3·d_model: query, key, value column blocks, each split by head.
    pub qkv_weight: Vec<f32>,
    pub qkv_bias: Vec<f32>,
    /// d_model × d_model; rows h·d_head..(h+1)·d_head belong to head h.
    pub out_weight: Vec<f32>,
    pub out_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub mlp_in_weight: Vec<f32>,
    pub mlp_in_bias: Vec<f32>,
    pub mlp_out_weight: Vec<f32>,
    pub mlp_out_bias: Vec<f32>,
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.d_mlp;
        Self {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            qkv_weight: vec![0.0; d * 3 * d],
            qkv_bias: vec![0.0; 3 * d],
            out_weight: vec![0.0; d * d],
            out_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            mlp_in_weight: vec![0.0; d * m],
            mlp_in_bias: vec![0.0; m],
            mlp_out_weight: vec![0.0; m * d],
            mlp_out_bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// vocab × d_model.
    pub token_embedding: Vec<f32>,
    /// max_positions × d_model.
    pub position_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f32>,
    pub final_ln_bias: Vec<f32>,
    /// vocab × d_model; `None` means tied to the token embedding.
    pub unembedding: Option<Vec<f32>>,
}

/// Expected (name, shape) pairs for a config. `lm_head.weight` is optional.
pub fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let m = cfg.d_mlp;
    let mut out = vec![
        ("wte.weight".to_string(), vec![cfg.vocab_size, d]),
        ("wpe.weight".to_string(), vec![cfg.max_positions, d]),
    ];
    for i in 0..cfg.n_layers {
        let p = format!("h.{i}");
        out.extend([
            (format!("{p}.ln_1.weight"), vec![d]),
            (format!("{p}.ln_1.bias"), vec![d]),
            (format!("{p}.attn.c_attn.weight"), vec![d, 3 * d]),
            (format!("{p}.attn.c_attn.bias"), vec![3 * d]),
            (format!("{p}.attn.c_proj.weight"), vec![d, d]),
            (format!("{p}.attn.c_proj.bias"), vec![d]),
            (format!("{p}.ln_2.weight"), vec![d]),
            (format!("{p}.ln_2.bias"), vec![d]),
            (format!("{p}.mlp.c_fc.weight"), vec![d, m]),
            (format!("{p}.mlp.c_fc.bias"), vec![m]),
            (format!("{p}.mlp.c_proj.weight"), vec![m, d]),
            (format!("{p}.mlp.c_proj.bias"), vec![d]),
        ]);
    }
    out.push(("ln_f.weight".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out
}

const UNEMBED: &str = "lm_head.weight";

/// Strip the `transformer.` prefix some exports carry.
fn canonical_name(name: &str) -> &str {
    name.strip_prefix("transformer.").unwrap_or(name)
}

fn take(map: &mut BTreeMap<String, StoredTensor>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let t = map.remove(name).ok_or_else(|| Error::Tensor {
        name: name.to_string(),
        reason: "missing from weights file".into(),
    })?;
    if t.shape != shape {
        return Err(Error::Tensor {
            name: name.to_string(),
            reason: format!("shape {:?}, expected {:?}", t.shape, shape),
        });
    }
    Ok(t.data)
}

impl ModelWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: vec![0.0; cfg.vocab_size * d],
            position_embedding: vec![0.0; cfg.max_positions * d],
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            unembedding: None,
        }
    }

    /// Unembedding matrix (vocab × d_model), tied or separate.
    pub fn unembed(&self) -> &[f32] {
        self.unembedding.as_deref().unwrap_or(&self.token_embedding)
    }

    /// Build from decoded tensors, enforcing the manifest. Unknown tensors
    /// (for example cached attention-mask buffers) are ignored.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, StoredTensor>) -> Result<Self> {
        let mut by_name: BTreeMap<String, StoredTensor> = tensors
            .into_iter()
            .map(|(k, v)| (canonical_name(&k).to_string(), v))
            .collect();
        let spec = manifest(cfg);
        let mut it = spec.iter();
        let mut next = || {
            let (n, s) = it.next().expect("manifest covers every field");
            take(&mut by_name, n, s)
        };
        let token_embedding = next()?;
        let position_embedding = next()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                ln1_gain: next()?,
                ln1_bias: next()?,
                qkv_weight: next()?,
                qkv_bias: next()?,
                out_weight: next()?,
                out_bias: next()?,
                ln2_gain: next()?,
                ln2_bias: next()?,
                mlp_in_weight: next()?,
                mlp_in_bias: next()?,
                mlp_out_weight: next()?,
                mlp_out_bias: next()?,
            });
        }
        let final_ln_gain = next()?;
        let final_ln_bias = next()?;
        let unembedding = match by_name.contains_key(UNEMBED) {
            true => Some(take(&mut by_name, UNEMBED, &[cfg.vocab_size, cfg.d_model])?),
            false => None,
        };
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain,
            final_ln_bias,
            unembedding,
        })
    }

    pub fn to_tensors(&self, cfg: &ModelConfig) -> BTreeMap<String, StoredTensor> {
        let mut values: Vec<&Vec<f32>> = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            values.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.qkv_weight,
                &l.qkv_bias,
                &l.out_weight,
                &l.out_bias,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.mlp_in_weight,
                &l.mlp_in_bias,
                &l.mlp_out_weight,
                &l.mlp_out_bias,
            ]);
        }
        values.push(&self.final_ln_gain);
        values.push(&self.final_ln_bias);
        let mut out: BTreeMap<String, StoredTensor> = manifest(cfg)
            .into_iter()
            .zip(values)
            .map(|((name, shape), data)| (name, StoredTensor::new(shape, data.clone())))
            .collect();
        if let Some(u) = &self.unembedding {
            out.insert(
                UNEMBED.to_string(),
                StoredTensor::new(vec![cfg.vocab_size, cfg.d_model], u.clone()),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureTag;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_head: 2,
            d_mlp: 8,
            vocab_size: 5,
            max_positions: 6,
            layernorm_epsilon: 1e-5,
            architecture_tag: ArchitectureTag::Gpt2Family,
        }
    }

    #[test]
    fn tensors_round_trip() {
        let c = cfg();
        let mut w = ModelWeights::zeros(&c);
        w.layers[0].qkv_weight[5] = 2.0;
        let back = ModelWeights::from_tensors(&c, w.to_tensors(&c)).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn missing_and_misshaped_tensors_are_named() {
        let c = cfg();
        let mut t = ModelWeights::zeros(&c).to_tensors(&c);
        t.remove("h.0.mlp.c_fc.bias");
        let err = ModelWeights::from_tensors(&c, t).unwrap_err().to_string();
        assert!(err.contains("h.0.mlp.c_fc.bias"), "{err}");

        let mut t = ModelWeights::zeros(&c).to_tensors(&c);
        t.get_mut("ln_f.weight").unwrap().shape = vec![2, 2];
        let err = ModelWeights::from_tensors(&c, t).unwrap_err().to_string();
        assert!(err.contains("ln_f.weight"), "{err}");
    }

    #[test]
    fn prefixed_names_accepted() {
        let c = cfg();
        let t: BTreeMap<_, _> = ModelWeights::zeros(&c)
            .to_tensors(&c)
            .into_iter()
            .map(|(k, v)| (format!("transformer.{k}"), v))
            .collect();
        assert!(ModelWeights::from_tensors(&c, t).is_ok());
    }
}
