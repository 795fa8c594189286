// SPDX-License-Identifier: MIT OR Apache-2.0

use std::f64::consts::PI;
use std::path::Path;

use super::layout::*;
use super::vocab::{numeral_id, toy_tokenizer};
use super::{IdleStyle, PlantedSpec, Role};
use crate::error::Result;
use crate::model::{ArchitectureTag, LayerWeights, ModelBundle, ModelConfig, ModelWeights};
use crate::model::reference::{write_checksums, ReferenceLogits, REFERENCE_FILE};

const LN_GAIN: f32 = ANCHOR_VALUE / 4.0;
/// Query/key scale of the prev-token head.
const PREV_QK: f64 = 24.0;
/// Mover query magnitude, and key weights on the prev-copy flag and on
/// recency.
const MOVER_Q: f32 = 8.0;
const MOVER_FLAG: f32 = 15.0;
const MOVER_RECENCY: f32 = 15.0;
const BACKUP_WEIGHT: f32 = 0.5;
/// Constant scratch write that keeps the backup from being a scaled copy of
/// the mover.
const BACKUP_MARK: f32 = 0.125;
/// Ramp units: gain, onset, width, and output height.
const RAMP_GAIN: f32 = 20.0;
const RAMP_ONSET: f32 = 0.25;
const RAMP_WIDTH: f32 = 0.5;
const NUM_HEIGHT: f32 = 4.0;
const INCREMENT_HEIGHT: f32 = 1.0;

/// Idle-head output pattern over (cos ap, sin ap, cos bp, sin bp, numeral
/// mass) → three target dims; rows sum to zero. Scaled by 1/8.
const IDLE_PATTERN: [[f32; 3]; 5] = [[1., -1., 0.], [0., 1., -1.], [1., 0., -1.], [1., 1., -2.], [2., -1., -1.]];
/// Idle-MLP read and write patterns over the scratch block.
const IDLE_MLP_READ: [[f32; 3]; 4] = [[2., 0., 0.], [0., 2., 0.], [0., 0., 2.], [1., 1., 1.]];
const IDLE_MLP_WRITE: [[f32; 3]; 4] = [[1., -1., 0.], [0., 1., -1.], [-1., 0., 1.], [1., 1., -2.]];

fn balance(row: &mut [f32]) {
    let s: f32 = row.iter().enumerate().filter(|(i, _)| *i != BALANCE).map(|(_, v)| v).sum();
    row[BALANCE] = -s;
}

fn config(spec: &PlantedSpec) -> ModelConfig {
    ModelConfig {
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_model: D_MODEL,
        d_head: spec.d_head,
        d_mlp: spec.d_mlp,
        vocab_size: VOCAB,
        max_positions: MAX_POSITIONS,
        layernorm_epsilon: 1e-5,
        architecture_tag: ArchitectureTag::Gpt2Family,
    }
}

fn embeddings(w: &mut ModelWeights) {
    let d = D_MODEL;
    for t in 0..VOCAB {
        let row = &mut w.token_embedding[t * d..(t + 1) * d];
        match (1..=N_NUMERALS).contains(&t) {
            true => row[NUM + t - 1] = 1.0,
            false => {
                let code = (t as u32).wrapping_mul(2_654_435_761) >> 7;
                for k in 0..4 {
                    row[FILL + k] = if code >> k & 1 == 1 { 0.5 } else { -0.5 };
                }
            }
        }
        balance(row);
    }
    let (a, b) = (2.0 * PI / 64.0, 2.0 * PI / 8.0);
    for p in 0..MAX_POSITIONS {
        let row = &mut w.position_embedding[p * d..(p + 1) * d];
        for k in 0..4 {
            row[ANCHOR + k] = if k % 2 == 0 { ANCHOR_VALUE } else { -ANCHOR_VALUE };
        }
        let pf = p as f64;
        row[POS] = (a * pf).cos() as f32;
        row[POS + 1] = (a * pf).sin() as f32;
        row[POS + 2] = (b * pf).cos() as f32;
        row[POS + 3] = (b * pf).sin() as f32;
        balance(row);
    }
}

struct HeadCols {
    d_head: usize,
    head: usize,
}

impl HeadCols {
    fn q(&self, e: usize) -> usize {
        self.head * self.d_head + e
    }
    fn k(&self, e: usize) -> usize {
        D_MODEL + self.head * self.d_head + e
    }
    fn v(&self, e: usize) -> usize {
        2 * D_MODEL + self.head * self.d_head + e
    }
    fn out_row(&self, e: usize) -> usize {
        self.head * self.d_head + e
    }
}

fn set_qkv(lw: &mut LayerWeights, input: usize, col: usize, value: f32) {
    lw.qkv_weight[input * 3 * D_MODEL + col] = value;
}

fn out_row(lw: &mut LayerWeights, row: usize) -> &mut [f32] {
    &mut lw.out_weight[row * D_MODEL..(row + 1) * D_MODEL]
}

fn prev_token_head(lw: &mut LayerWeights, c: &HeadCols) {
    let (a, b) = (2.0 * PI / 64.0, 2.0 * PI / 8.0);
    // Query is the position code rotated back one step.
    for (pair, freq) in [(0usize, a), (2usize, b)] {
        let (cs, sn) = ((PREV_QK * freq.cos()) as f32, (PREV_QK * freq.sin()) as f32);
        set_qkv(lw, POS + pair, c.q(pair), cs);
        set_qkv(lw, POS + pair + 1, c.q(pair), sn);
        set_qkv(lw, POS + pair + 1, c.q(pair + 1), cs);
        set_qkv(lw, POS + pair, c.q(pair + 1), -sn);
    }
    for k in 0..4 {
        set_qkv(lw, POS + k, c.k(k), PREV_QK as f32);
    }
    for n in 0..N_NUMERALS {
        set_qkv(lw, NUM + n, c.v(n), 1.0);
        let row = out_row(lw, c.out_row(n));
        row[PREV + n] = 1.0;
        balance(row);
    }
}

fn mover_head(lw: &mut LayerWeights, c: &HeadCols, weight: f32, mark: f32) {
    set_qkv(lw, ANCHOR, c.q(0), MOVER_Q / ANCHOR_VALUE);
    set_qkv(lw, ANCHOR, c.q(1), MOVER_Q / ANCHOR_VALUE);
    for n in 0..N_NUMERALS {
        set_qkv(lw, PREV + n, c.k(0), MOVER_FLAG);
    }
    set_qkv(lw, POS, c.k(1), -MOVER_RECENCY);
    for n in 0..N_NUMERALS {
        set_qkv(lw, PREV + n, c.v(n), 1.0);
        let row = out_row(lw, c.out_row(n));
        row[MOVED + n] = weight;
        row[SCRATCH + 2] = mark;
        balance(row);
    }
}

fn idle_head(lw: &mut LayerWeights, c: &HeadCols, index: usize, style: IdleStyle) {
    for k in 0..4 {
        set_qkv(lw, POS + k, c.v(k), 1.0);
    }
    for n in 0..N_NUMERALS {
        set_qkv(lw, NUM + n, c.v(4), 0.25);
    }
    let mut pattern = IDLE_PATTERN;
    // Distinct per head so no two idle heads are scaled copies.
    let delta = index as f32 / 16.0 - 0.5;
    pattern[4][0] += delta;
    pattern[4][1] -= delta;
    let targets: &[(usize, f32)] = match style {
        IdleStyle::Base => &[(SCRATCH, 1.0)],
        IdleStyle::Rotated => &[(SCRATCH, 0.5), (FILL, 0.875)],
        IdleStyle::Orthogonal => &[(FILL, 1.0)],
    };
    for (k, coeffs) in pattern.iter().enumerate() {
        let row = out_row(lw, c.out_row(k));
        for &(block, scale) in targets {
            for (j, v) in coeffs.iter().enumerate() {
                row[block + j] = scale * v / 8.0;
            }
        }
        balance(row);
    }
}

fn set_mlp_in(lw: &mut LayerWeights, d_mlp: usize, input: usize, unit: usize, value: f32) {
    lw.mlp_in_weight[input * d_mlp + unit] = value;
}

fn mlp_out_row(lw: &mut LayerWeights, unit: usize) -> &mut [f32] {
    &mut lw.mlp_out_weight[unit * D_MODEL..(unit + 1) * D_MODEL]
}

/// Two units per code index: a ramp from `read + n` to `writes(n)` that
/// saturates once the input exceeds onset + width.
fn ramp_mlp(lw: &mut LayerWeights, d_mlp: usize, read: usize, writes: impl Fn(usize) -> Vec<(usize, f32)>, count: usize) {
    let scale = 1.0 / (RAMP_GAIN * RAMP_WIDTH);
    for n in 0..count {
        let (u0, u1) = (2 * n, 2 * n + 1);
        set_mlp_in(lw, d_mlp, read + n, u0, RAMP_GAIN);
        set_mlp_in(lw, d_mlp, read + n, u1, RAMP_GAIN);
        lw.mlp_in_bias[u0] = -RAMP_GAIN * RAMP_ONSET;
        lw.mlp_in_bias[u1] = -RAMP_GAIN * (RAMP_ONSET + RAMP_WIDTH);
        for (unit, sign) in [(u0, 1.0f32), (u1, -1.0)] {
            let row = mlp_out_row(lw, unit);
            for &(dim, h) in &writes(n) {
                row[dim] = sign * h * scale;
            }
            balance(row);
        }
    }
}

fn idle_mlp(lw: &mut LayerWeights, d_mlp: usize) {
    for (u, read) in IDLE_MLP_READ.iter().enumerate() {
        for (k, v) in read.iter().enumerate() {
            set_mlp_in(lw, d_mlp, SCRATCH + k, u, *v);
        }
        lw.mlp_in_bias[u] = 0.125;
        let row = mlp_out_row(lw, u);
        for (j, v) in IDLE_MLP_WRITE[u].iter().enumerate() {
            row[SCRATCH + j] = v / 8.0;
        }
        balance(row);
    }
}

/// Build one planted model from its spec.
pub fn build_model(spec: &PlantedSpec) -> Result<ModelBundle> {
    spec.validate()?;
    let cfg = config(spec);
    let mut w = ModelWeights::zeros(&cfg);
    embeddings(&mut w);
    w.final_ln_gain = vec![LN_GAIN; D_MODEL];
    let mover_layer = spec
        .planted
        .iter()
        .find(|p| p.role == Role::Mover)
        .map(|p| p.component.layer)
        .expect("validated");
    for (layer, lw) in w.layers.iter_mut().enumerate() {
        lw.ln1_gain = vec![LN_GAIN; D_MODEL];
        lw.ln2_gain = vec![LN_GAIN; D_MODEL];
        for head in 0..spec.n_heads {
            let c = HeadCols { d_head: spec.d_head, head };
            match spec.role_of(crate::model::ComponentId::head(layer, head)) {
                Some(Role::PrevToken) => prev_token_head(lw, &c),
                Some(Role::Mover) => mover_head(lw, &c, 1.0, 0.0),
                Some(Role::Backup) => mover_head(lw, &c, BACKUP_WEIGHT, BACKUP_MARK),
                _ => idle_head(lw, &c, layer * spec.n_heads + head, spec.idle_style),
            }
        }
        match spec.role_of(crate::model::ComponentId::mlp(layer)) {
            Some(Role::Successor) if layer < mover_layer => ramp_mlp(
                lw,
                spec.d_mlp,
                PREV,
                |n| vec![(PREV + n + 1, INCREMENT_HEIGHT), (PREV + n, -INCREMENT_HEIGHT)],
                N_NUMERALS - 1,
            ),
            Some(Role::Successor) => ramp_mlp(lw, spec.d_mlp, MOVED, |n| vec![(NUM + n + 1, NUM_HEIGHT)], N_NUMERALS - 1),
            Some(Role::Readout) => ramp_mlp(lw, spec.d_mlp, MOVED, |n| vec![(NUM + n, NUM_HEIGHT)], N_NUMERALS),
            _ => idle_mlp(lw, spec.d_mlp),
        }
    }
    debug_assert_eq!(numeral_id(0), 1);
    ModelBundle::from_parts(&spec.name, cfg, w, toy_tokenizer())
}

pub fn build_planted_pair(teacher: &PlantedSpec, student: &PlantedSpec) -> Result<(ModelBundle, ModelBundle)> {
    Ok((build_model(teacher)?, build_model(student)?))
}

/// The shipped teacher and its high / medium / low alignment students.
pub fn standard_trio() -> Result<(ModelBundle, Vec<ModelBundle>)> {
    let teacher = build_model(&PlantedSpec::teacher())?;
    let students = [IdleStyle::Base, IdleStyle::Rotated, IdleStyle::Orthogonal]
        .iter()
        .map(|s| build_model(&PlantedSpec::student(*s)))
        .collect::<Result<Vec<_>>>()?;
    Ok((teacher, students))
}

/// Prompts the shipped bundles carry reference logits for.
pub const TOY_REFERENCE_PROMPTS: [&str; 5] = [
    "<|endoftext|> 3 4 5 6",
    "<|endoftext|> Van done in 1. Hat done in 2. Cup done in",
    "<|endoftext|>When Mary and John went to the store, John gave a bottle of milk to",
    "<|endoftext|> one two three",
    "<|endoftext|> 7 8",
];

/// Write the teacher and the three students as loadable bundle directories,
/// each with engine-computed reference logits and a checksum manifest.
pub fn write_fixtures(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let (teacher, students) = standard_trio()?;
    let mut out = Vec::new();
    for m in std::iter::once(&teacher).chain(&students) {
        let path = dir.join(&m.name);
        m.save_dir(&path)?;
        let reference = ReferenceLogits::from_engine(m, &TOY_REFERENCE_PROMPTS)?;
        let mut bytes = serde_json::to_vec_pretty(&reference)?;
        bytes.push(b'\n');
        std::fs::write(path.join(REFERENCE_FILE), bytes)?;
        write_checksums(&path, &["config.json", "model.safetensors", "vocab.json", "merges.txt", REFERENCE_FILE])?;
        out.push(path);
    }
    Ok(out)
}
