// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT2-family forward pass with hook recording, activation overrides,
//! per-slot input edits (for path patching) and output-noise injection.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::hooks::{HookPoint, HookSet, Site};
use super::tensor::Tensor;
use super::weights::LayerWeights;
use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};

/// Replacement for the tensor at one hook point. With `positions` set, only
/// those rows are substituted.
#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub values: Tensor,
    pub positions: Option<Vec<usize>>,
}

impl Replacement {
    pub fn all(values: Tensor) -> Self {
        Self { values, positions: None }
    }

    pub fn at(values: Tensor, positions: Vec<usize>) -> Self {
        Self {
            values,
            positions: Some(positions),
        }
    }
}

/// A component input slot whose residual-stream read can be edited alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotTarget {
    Query { layer: usize, head: usize },
    Key { layer: usize, head: usize },
    Value { layer: usize, head: usize },
    MlpIn { layer: usize },
    /// The residual stream read by the final layernorm and unembedding.
    DirectOut,
}

/// Additive edit (positions × d_model) to the residual read by one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotEdit {
    pub target: SlotTarget,
    pub delta: Tensor,
}

/// Zero-mean Gaussian noise on every head_out and mlp_out, drawn from a
/// stream keyed by (seed, example, hook).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
    pub example: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interventions {
    pub overrides: BTreeMap<HookPoint, Replacement>,
    pub slot_edits: Vec<SlotEdit>,
    pub noise: Option<NoiseSpec>,
}

impl Interventions {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty() && self.slot_edits.is_empty() && self.noise.is_none()
    }

    pub fn with_override(mut self, hook: HookPoint, r: Replacement) -> Self {
        self.overrides.insert(hook, r);
        self
    }

    pub fn with_noise(mut self, noise: Option<NoiseSpec>) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self, cfg: &ModelConfig, seq: usize) -> Result<()> {
        for (hook, r) in &self.overrides {
            hook.validate(cfg)?;
            let want = (seq, hook.site.width(cfg, seq));
            if r.values.shape() != want {
                return Err(Error::InvalidArgument(format!(
                    "override for {hook} has shape {:?}, expected {:?}",
                    r.values.shape(),
                    want
                )));
            }
            if let Some(ps) = &r.positions {
                if let Some(p) = ps.iter().find(|&&p| p >= seq) {
                    return Err(Error::InvalidArgument(format!(
                        "override for {hook} names position {p} beyond prompt length {seq}"
                    )));
                }
            }
        }
        for e in &self.slot_edits {
            let (layer, head) = match e.target {
                SlotTarget::Query { layer, head } | SlotTarget::Key { layer, head } | SlotTarget::Value { layer, head } => {
                    (Some(layer), Some(head))
                }
                SlotTarget::MlpIn { layer } => (Some(layer), None),
                SlotTarget::DirectOut => (None, None),
            };
            if layer.is_some_and(|l| l >= cfg.n_layers) || head.is_some_and(|h| h >= cfg.n_heads) {
                return Err(Error::InvalidArgument(format!("slot edit {:?} out of range", e.target)));
            }
            if e.delta.shape() != (seq, cfg.d_model) {
                return Err(Error::InvalidArgument(format!(
                    "slot edit {:?} has shape {:?}, expected {:?}",
                    e.target,
                    e.delta.shape(),
                    (seq, cfg.d_model)
                )));
            }
        }
        if let Some(n) = &self.noise {
            if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
                return Err(Error::InvalidArgument(format!("noise sigma {} must be >= 0", n.sigma)));
            }
        }
        Ok(())
    }
}

/// Recorded activations of one forward pass. Read-only once returned.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    tokens: Vec<u32>,
    tensors: BTreeMap<HookPoint, Tensor>,
}

impl ActivationCache {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn get(&self, hook: &HookPoint) -> Result<&Tensor> {
        self.tensors.get(hook).ok_or_else(|| Error::CacheMiss(hook.to_string()))
    }

    pub fn contains(&self, hook: &HookPoint) -> bool {
        self.tensors.contains_key(hook)
    }

    pub fn hooks(&self) -> impl Iterator<Item = &HookPoint> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Logits at the final position.
    pub logits: Vec<f32>,
    pub cache: ActivationCache,
}

pub(crate) fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f64, out: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = ((x[i] as f64 - mean) * inv * gain[i] as f64 + bias[i] as f64) as f32;
    }
}

fn layer_norm_rows(x: &Tensor, gain: &[f32], bias: &[f32], eps: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        layer_norm(x.row(r), gain, bias, eps, out.row_mut(r));
    }
    out
}

/// `x @ W[:, col0..col0+n] + b[col0..col0+n]` with W stored (in × total).
fn linear_cols(x: &Tensor, w: &[f32], b: &[f32], total: usize, col0: usize, n: usize) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), n);
    let mut acc = vec![0f64; n];
    for r in 0..x.rows() {
        for (a, bias) in acc.iter_mut().zip(&b[col0..col0 + n]) {
            *a = *bias as f64;
        }
        for (i, &xi) in x.row(r).iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let xi = xi as f64;
            let wrow = &w[i * total + col0..i * total + col0 + n];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xi * wv as f64;
            }
        }
        for (o, a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

fn linear(x: &Tensor, w: &[f32], b: &[f32], out: usize) -> Tensor {
    linear_cols(x, w, b, out, 0, out)
}

pub(crate) fn gelu_new(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn noise_stream(seed: u64, example: u64, hook: &HookPoint) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [
        example,
        hook.layer as u64,
        hook.site as u64,
        hook.head.map_or(u64::MAX, |x| x as u64),
    ] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Sum edits that target the same slot.
fn merge_edits(edits: &[SlotEdit]) -> HashMap<SlotTarget, Tensor> {
    let mut out: HashMap<SlotTarget, Tensor> = HashMap::new();
    for e in edits {
        match out.get_mut(&e.target) {
            Some(t) => t.add_assign(&e.delta),
            None => {
                out.insert(e.target, e.delta.clone());
            }
        }
    }
    out
}

struct Pass<'a> {
    cfg: &'a ModelConfig,
    record: &'a HookSet,
    iv: &'a Interventions,
    edits: HashMap<SlotTarget, Tensor>,
    cache: BTreeMap<HookPoint, Tensor>,
}

impl Pass<'_> {
    /// Apply noise, then any override, then record.
    fn site(&mut self, hook: HookPoint, t: &mut Tensor) {
        if let (Some(n), Site::HeadOut | Site::MlpOut) = (&self.iv.noise, hook.site) {
            if n.sigma > 0.0 {
                let mut rng = noise_stream(n.seed, n.example, &hook);
                let dist = Normal::new(0.0, n.sigma).expect("sigma validated");
                for v in t.data_mut() {
                    *v += dist.sample(&mut rng) as f32;
                }
            }
        }
        if let Some(r) = self.iv.overrides.get(&hook) {
            match &r.positions {
                None => t.data_mut().copy_from_slice(r.values.data()),
                Some(ps) => {
                    for &p in ps {
                        t.row_mut(p).copy_from_slice(r.values.row(p));
                    }
                }
            }
        }
        if self.record.contains(&hook) {
            self.cache.insert(hook, t.clone());
        }
    }

    fn edited_input(&self, target: SlotTarget, resid: &Tensor) -> Option<Tensor> {
        self.edits.get(&target).map(|d| {
            let mut x = resid.clone();
            x.add_assign(d);
            x
        })
    }

    fn attention(&mut self, layer: usize, lw: &LayerWeights, resid: &Tensor) -> Tensor {
        let cfg = self.cfg;
        let (d, dh, seq) = (cfg.d_model, cfg.d_head, resid.rows());
        let eps = cfg.layernorm_epsilon;
        let ln = layer_norm_rows(resid, &lw.ln1_gain, &lw.ln1_bias, eps);
        let qkv = linear(&ln, &lw.qkv_weight, &lw.qkv_bias, 3 * d);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn_out = Tensor::zeros(seq, d);
        for h in 0..cfg.n_heads {
            let proj = |which: usize, target: SlotTarget| -> Tensor {
                let col0 = which * d + h * dh;
                match self.edited_input(target, resid) {
                    Some(x) => {
                        let ln = layer_norm_rows(&x, &lw.ln1_gain, &lw.ln1_bias, eps);
                        linear_cols(&ln, &lw.qkv_weight, &lw.qkv_bias, 3 * d, col0, dh)
                    }
                    None => {
                        let mut t = Tensor::zeros(seq, dh);
                        for r in 0..seq {
                            t.row_mut(r).copy_from_slice(&qkv.row(r)[col0..col0 + dh]);
                        }
                        t
                    }
                }
            };
            let mut q = proj(0, SlotTarget::Query { layer, head: h });
            let mut k = proj(1, SlotTarget::Key { layer, head: h });
            let mut v = proj(2, SlotTarget::Value { layer, head: h });
            self.site(HookPoint::head(layer, Site::HeadQ, h), &mut q);
            self.site(HookPoint::head(layer, Site::HeadK, h), &mut k);
            self.site(HookPoint::head(layer, Site::HeadV, h), &mut v);

            let mut pattern = Tensor::zeros(seq, seq);
            let mut scores = vec![0f64; seq];
            for i in 0..seq {
                let qi = q.row(i);
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                    let dot: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| *a as f64 * *b as f64).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for (j, s) in scores.iter().enumerate().take(i + 1) {
                    pattern.row_mut(i)[j] = (s / z) as f32;
                }
            }
            self.site(HookPoint::head(layer, Site::HeadPattern, h), &mut pattern);

            let mut head_out = Tensor::zeros(seq, d);
            let mut zrow = vec![0f64; dh];
            let mut acc = vec![0f64; d];
            for i in 0..seq {
                zrow.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..=i {
                    let p = pattern.get(i, j) as f64;
                    if p == 0.0 {
                        continue;
                    }
                    for (zz, &vv) in zrow.iter_mut().zip(v.row(j)) {
                        *zz += p * vv as f64;
                    }
                }
                acc.iter_mut().for_each(|x| *x = 0.0);
                for (e, &ze) in zrow.iter().enumerate() {
                    if ze == 0.0 {
                        continue;
                    }
                    let wrow = &lw.out_weight[(h * dh + e) * d..(h * dh + e + 1) * d];
                    for (a, &w) in acc.iter_mut().zip(wrow) {
                        *a += ze * w as f64;
                    }
                }
                for (o, a) in head_out.row_mut(i).iter_mut().zip(&acc) {
                    *o = *a as f32;
                }
            }
            self.site(HookPoint::head(layer, Site::HeadOut, h), &mut head_out);
            attn_out.add_assign(&head_out);
        }
        for r in 0..seq {
            for (o, b) in attn_out.row_mut(r).iter_mut().zip(&lw.out_bias) {
                *o += *b;
            }
        }
        attn_out
    }

    fn mlp(&mut self, layer: usize, lw: &LayerWeights, resid_mid: &Tensor) -> Tensor {
        let cfg = self.cfg;
        let input = self.edited_input(SlotTarget::MlpIn { layer }, resid_mid);
        let ln = layer_norm_rows(input.as_ref().unwrap_or(resid_mid), &lw.ln2_gain, &lw.ln2_bias, cfg.layernorm_epsilon);
        let mut pre = linear(&ln, &lw.mlp_in_weight, &lw.mlp_in_bias, cfg.d_mlp);
        self.site(HookPoint::new(layer, Site::MlpPre), &mut pre);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|x| *x = gelu_new(*x));
        self.site(HookPoint::new(layer, Site::MlpAct), &mut act);
        let mut out = linear(&act, &lw.mlp_out_weight, &lw.mlp_out_bias, cfg.d_model);
        self.site(HookPoint::new(layer, Site::MlpOut), &mut out);
        out
    }
}

impl ModelBundle {
    /// Run the model on `tokens`, recording `record` and applying `iv`.
    /// All intervention shapes are checked before any compute.
    pub fn forward(&self, tokens: &[u32], record: &HookSet, iv: &Interventions) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let seq = tokens.len();
        if seq == 0 || seq > cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "prompt length {seq} outside 1..={}",
                cfg.max_positions
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {t} >= vocab_size {}", cfg.vocab_size)));
        }
        for hook in record.iter() {
            hook.validate(cfg)?;
        }
        iv.validate(cfg, seq)?;

        let w = &self.weights;
        let d = cfg.d_model;
        let mut pass = Pass {
            cfg,
            record,
            iv,
            edits: merge_edits(&iv.slot_edits),
            cache: BTreeMap::new(),
        };

        let mut resid = Tensor::zeros(seq, d);
        for (p, &t) in tokens.iter().enumerate() {
            let te = &w.token_embedding[t as usize * d..(t as usize + 1) * d];
            let pe = &w.position_embedding[p * d..(p + 1) * d];
            for ((o, a), b) in resid.row_mut(p).iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        for (layer, lw) in w.layers.iter().enumerate() {
            pass.site(HookPoint::new(layer, Site::ResidPre), &mut resid);
            let attn = pass.attention(layer, lw, &resid);
            let mut mid = resid;
            mid.add_assign(&attn);
            pass.site(HookPoint::new(layer, Site::ResidMid), &mut mid);
            let mlp = pass.mlp(layer, lw, &mid);
            let mut post = mid;
            post.add_assign(&mlp);
            pass.site(HookPoint::new(layer, Site::ResidPost), &mut post);
            resid = post;
        }
        if let Some(delta) = pass.edits.get(&SlotTarget::DirectOut) {
            resid.add_assign(delta);
        }

        let logits_hook = HookPoint::new(cfg.n_layers - 1, Site::Logits);
        let logits = if record.contains(&logits_hook) || iv.overrides.contains_key(&logits_hook) {
            let mut all = Tensor::zeros(seq, cfg.vocab_size);
            for p in 0..seq {
                all.row_mut(p).copy_from_slice(&self.unembed_residual(resid.row(p)));
            }
            pass.site(logits_hook, &mut all);
            all.row(seq - 1).to_vec()
        } else {
            self.unembed_residual(resid.row(seq - 1))
        };
        Ok(ForwardOutput {
            logits,
            cache: ActivationCache {
                tokens: tokens.to_vec(),
                tensors: pass.cache,
            },
        })
    }

    /// Convenience: final-position logits with no hooks or interventions.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(self.forward(tokens, &HookSet::new(), &Interventions::none())?.logits)
    }

    /// Final layernorm followed by the unembedding, for one residual row.
    pub fn unembed_residual(&self, resid: &[f32]) -> Vec<f32> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let mut ln = vec![0f32; d];
        layer_norm(
            resid,
            &self.weights.final_ln_gain,
            &self.weights.final_ln_bias,
            cfg.layernorm_epsilon,
            &mut ln,
        );
        let u = self.weights.unembed();
        (0..cfg.vocab_size)
            .map(|t| {
                u[t * d..(t + 1) * d]
                    .iter()
                    .zip(&ln)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    }
}
