// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{logit_difference, HookPoint, HookSet, Interventions, ModelBundle, Site};
use crate::task::TaskDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Embedding,
    Attention,
    Mlp,
}

/// What one block wrote into the residual stream, measured along the
/// answer direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockContribution {
    pub block: String,
    pub kind: BlockKind,
    pub layer: Option<usize>,
    /// Mean contribution at the final position.
    pub final_token: f64,
    /// Mean contribution per position index (examples of every length that
    /// reach the index are averaged).
    pub per_position: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub model: String,
    pub dataset_hash: String,
    pub blocks: Vec<BlockContribution>,
    /// Contribution of the final layernorm bias.
    pub bias_term: f64,
    /// Sum of every block plus the bias term.
    pub reconstructed: f64,
    /// Mean Δℓ from the actual logits.
    pub logit_diff: f64,
}

impl AttributionTable {
    pub fn relative_error(&self) -> f64 {
        (self.reconstructed - self.logit_diff).abs() / self.logit_diff.abs().max(f64::MIN_POSITIVE)
    }

    pub fn mlps(&self) -> impl Iterator<Item = &BlockContribution> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Mlp)
    }

    /// Share of total absolute MLP attribution held by the MLP of `layer`.
    pub fn mlp_share(&self, layer: usize) -> f64 {
        let total: f64 = self.mlps().map(|b| b.final_token.abs()).sum();
        let mine = self
            .mlps()
            .find(|b| b.layer == Some(layer))
            .map_or(0.0, |b| b.final_token.abs());
        if total == 0.0 {
            0.0
        } else {
            mine / total
        }
    }

    /// Long-format CSV: `block,kind,layer,position,contribution`; position
    /// `final` carries the final-token mean.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,kind,layer,position,contribution\n");
        for b in &self.blocks {
            let layer = b.layer.map_or(String::new(), |l| l.to_string());
            let kind = match b.kind {
                BlockKind::Embedding => "embedding",
                BlockKind::Attention => "attention",
                BlockKind::Mlp => "mlp",
            };
            let _ = writeln!(s, "{},{kind},{layer},final,{:.6}", b.block, b.final_token);
            for (p, v) in b.per_position.iter().enumerate() {
                let _ = writeln!(s, "{},{kind},{layer},{p},{:.6}", b.block, v);
            }
        }
        s
    }
}

/// Per-example block contributions: `[block][position]`, the bias term,
/// and the actual Δℓ.
type ExampleAttribution = (Vec<Vec<f64>>, f64, f64);

/// Decompose the final residual stream into embedding, attention and MLP
/// writes and project each through the final layernorm (with the clean
/// run's scale frozen) onto `W_U[correct] − W_U[incorrect]`.
pub fn mlp_attribution(model: &ModelBundle, ds: &TaskDataset, exec: Exec) -> Result<AttributionTable> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("attribution needs a non-empty dataset".into()));
    }
    let cfg = &model.config;
    let (nl, d) = (cfg.n_layers, cfg.d_model);
    let mut hooks = HookSet::new();
    for l in 0..nl {
        for site in [Site::ResidPre, Site::ResidMid, Site::ResidPost] {
            hooks.insert(HookPoint::new(l, site));
        }
    }
    let gain = &model.weights.final_ln_gain;
    let bias = &model.weights.final_ln_bias;
    let unembed = model.weights.unembed();
    let none = Interventions::none();

    let per_example: Vec<ExampleAttribution> = exec.try_map(&ds.examples, |e| {
        let out = model.forward(&e.prompt_tokens, &hooks, &none)?;
        let get = |l: usize, site: Site| out.cache.get(&HookPoint::new(l, site));
        let (c, i) = (e.correct_token as usize, e.incorrect_token as usize);
        let dir: Vec<f64> = (0..d)
            .map(|k| unembed[c * d + k] as f64 - unembed[i * d + k] as f64)
            .collect();
        let last = get(nl - 1, Site::ResidPost)?;
        let len = e.len();
        let scales: Vec<f64> = (0..len)
            .map(|p| {
                let row = last.row(p);
                let m = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / d as f64;
                1.0 / (var + cfg.layernorm_epsilon).sqrt()
            })
            .collect();
        let project = |x: &[f32], p: usize| -> f64 {
            let m = x.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            (0..d).map(|k| (x[k] as f64 - m) * scales[p] * gain[k] as f64 * dir[k]).sum()
        };
        let mut blocks = Vec::with_capacity(1 + 2 * nl);
        let embed = get(0, Site::ResidPre)?;
        blocks.push((0..len).map(|p| project(embed.row(p), p)).collect());
        for l in 0..nl {
            let (pre, mid, post) = (get(l, Site::ResidPre)?, get(l, Site::ResidMid)?, get(l, Site::ResidPost)?);
            let attn = mid.sub(pre);
            let mlp = post.sub(mid);
            blocks.push((0..len).map(|p| project(attn.row(p), p)).collect());
            blocks.push((0..len).map(|p| project(mlp.row(p), p)).collect());
        }
        let bias_term: f64 = (0..d).map(|k| bias[k] as f64 * dir[k]).sum();
        let logits = model.unembed_residual(last.row(len - 1));
        let actual = logit_difference(&logits, e.correct_token, e.incorrect_token)?;
        Ok::<_, Error>((blocks, bias_term, actual))
    })?;

    let n = per_example.len() as f64;
    let mut names = vec![("embed".to_string(), BlockKind::Embedding, None)];
    for l in 0..nl {
        names.push((format!("L{l}.attn"), BlockKind::Attention, Some(l)));
        names.push((format!("L{l}.MLP"), BlockKind::Mlp, Some(l)));
    }
    let mut blocks = Vec::with_capacity(names.len());
    for (b, (block, kind, layer)) in names.into_iter().enumerate() {
        let final_token = per_example.iter().map(|(bl, _, _)| *bl[b].last().unwrap_or(&0.0)).sum::<f64>() / n;
        let mut by_pos: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (bl, _, _) in &per_example {
            for (p, v) in bl[b].iter().enumerate() {
                let slot = by_pos.entry(p).or_insert((0.0, 0));
                slot.0 += v;
                slot.1 += 1;
            }
        }
        let per_position = by_pos.values().map(|(s, c)| s / *c as f64).collect();
        blocks.push(BlockContribution { block, kind, layer, final_token, per_position });
    }
    let bias_term = per_example.iter().map(|x| x.1).sum::<f64>() / n;
    let logit_diff = per_example.iter().map(|x| x.2).sum::<f64>() / n;
    let reconstructed = blocks.iter().map(|b| b.final_token).sum::<f64>() + bias_term;
    Ok(AttributionTable {
        model: model.name.clone(),
        dataset_hash: ds.content_hash.clone(),
        blocks,
        bias_term,
        reconstructed,
        logit_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::gen_numeral_sequences;
    use crate::toy::{build_model, PlantedSpec};

    #[test]
    fn decomposition_reconstructs_logit_diff() {
        let m = build_model(&PlantedSpec::teacher()).unwrap();
        let ds = gen_numeral_sequences(12, 3, &m.tokenizer).unwrap();
        let t = mlp_attribution(&m, &ds, Exec::Sequential).unwrap();
        assert!(t.relative_error() < 0.05, "{} vs {}", t.reconstructed, t.logit_diff);
        assert!(t.mlp_share(1) > 0.9, "share {}", t.mlp_share(1));
        assert_eq!(t.blocks.len(), 1 + 2 * m.config.n_layers);
    }

    #[test]
    fn zeroed_mlps_contribute_nothing() {
        let mut m = build_model(&PlantedSpec::teacher()).unwrap();
        for lw in &mut m.weights.layers {
            lw.mlp_out_weight.iter_mut().for_each(|w| *w = 0.0);
            lw.mlp_out_bias.iter_mut().for_each(|w| *w = 0.0);
        }
        let ds = gen_numeral_sequences(6, 1, &m.tokenizer).unwrap();
        let t = mlp_attribution(&m, &ds, Exec::Sequential).unwrap();
        for b in t.mlps() {
            assert!(b.final_token.abs() < 1e-6, "{}: {}", b.block, b.final_token);
            assert!(b.per_position.iter().all(|v| v.abs() < 1e-6));
        }
    }
}
