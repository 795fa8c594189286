// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes: one softmax layer trained with full-batch Adam on
//! z-scored features, a stratified train/validation split, class-balanced
//! loss weights, and a label-permutation control.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ComponentId, HookPoint, HookSet, Interventions, ModelBundle, Site};
use crate::task::{TaskDataset, TaskExample};
use crate::tensor_math::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Token at the i-th target position, read at the final position.
    IthNumeral(usize),
    /// The correct answer token, read at the final position.
    NextNumeral,
    /// The whole tuple of target tokens, read at the final position.
    FullSequence,
    /// Token at the last target position, read at the final position.
    PreviousNumeral,
    /// Whether the token at each position occurred earlier in the prompt;
    /// one row per position.
    PriorOccurrence,
}

impl std::str::FromStr for ProbeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "next_numeral" => ProbeTarget::NextNumeral,
            "full_sequence" => ProbeTarget::FullSequence,
            "previous_numeral" => ProbeTarget::PreviousNumeral,
            "prior_occurrence_binary" | "prior_occurrence" => ProbeTarget::PriorOccurrence,
            other => match other.strip_prefix("ith_numeral:") {
                Some(i) => ProbeTarget::IthNumeral(
                    i.parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad numeral index in `{s}`")))?,
                ),
                None => return Err(Error::InvalidArgument(format!("unknown probe target `{s}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    ResidPost,
    /// Value vectors of one head; the layer range is ignored.
    HeadValues(ComponentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub target: ProbeTarget,
    pub source: ProbeSource,
    /// Inclusive layer range; `None` means every layer.
    pub layers: Option<(usize, usize)>,
    pub train_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty added to the gradient; off by default.
    pub weight_decay: f64,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn new(target: ProbeTarget, seed: u64) -> Self {
        Self {
            target,
            source: ProbeSource::ResidPost,
            layers: None,
            train_fraction: 0.8,
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train fraction must lie in (0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("probe needs at least one epoch".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Macro-averaged (per-class mean) validation accuracy.
    pub accuracy: f64,
    /// Validation AUROC, binary targets only.
    pub auroc: Option<f64>,
    pub permutation_accuracy: f64,
    pub permutation_auroc: Option<f64>,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// 1 / n_classes.
    pub chance: f64,
    /// Three binomial standard deviations around chance at `n_val`.
    pub chance_band: f64,
}

impl ProbeResult {
    pub fn permutation_within_chance(&self) -> bool {
        (self.permutation_accuracy - self.chance).abs() <= self.chance_band
    }
}

struct Split {
    train: Vec<usize>,
    val: Vec<usize>,
}

fn stratified_split(labels: &[usize], n_classes: usize, frac: f64, rng: &mut ChaCha8Rng) -> Result<Split> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, members) in by_class.iter_mut().enumerate() {
        members.shuffle(rng);
        let n_train = (members.len() as f64 * frac).round() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(Error::Resample(format!(
                "class {k} has {} examples; it cannot appear in both splits",
                members.len()
            )));
        }
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}

/// Softmax regression weights: `w[k][j]`, `b[k]`.
struct Linear {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Linear {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(wk, bk)| bk + wk.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

fn train(x: &[Vec<f64>], y: &[usize], n_classes: usize, spec: &ProbeSpec) -> Linear {
    let d = x.first().map_or(0, Vec::len);
    let mut counts = vec![0usize; n_classes];
    for &k in y {
        counts[k] += 1;
    }
    // Each class carries equal total weight.
    let weight: Vec<f64> = counts.iter().map(|&c| 1.0 / (n_classes as f64 * c.max(1) as f64)).collect();
    let mut model = Linear { w: vec![vec![0.0; d]; n_classes], b: vec![0.0; n_classes] };
    let n_params = n_classes * (d + 1);
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for step in 1..=spec.epochs {
        let mut grad = vec![0.0; n_params];
        for (xi, &yi) in x.iter().zip(y) {
            let mut p = model.scores(xi);
            softmax_in_place(&mut p);
            for k in 0..n_classes {
                let g = weight[yi] * (p[k] - if k == yi { 1.0 } else { 0.0 });
                let row = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                for j in 0..d {
                    row[j] += g * xi[j];
                }
                row[d] += g;
            }
        }
        for k in 0..n_classes {
            for j in 0..d {
                grad[k * (d + 1) + j] += spec.weight_decay * model.w[k][j];
            }
        }
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for (idx, g) in grad.iter().enumerate() {
            m[idx] = b1 * m[idx] + (1.0 - b1) * g;
            v[idx] = b2 * v[idx] + (1.0 - b2) * g * g;
            let update = spec.learning_rate * (m[idx] / c1) / ((v[idx] / c2).sqrt() + eps);
            let (k, j) = (idx / (d + 1), idx % (d + 1));
            if j == d {
                model.b[k] -= update;
            } else {
                model.w[k][j] -= update;
            }
        }
    }
    model
}

/// Rank-based AUROC of `scores` for the positive class; ties count half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = crate::tensor_math::ranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

fn fit_and_score(
    features: &Matrix,
    labels: &[usize],
    n_classes: usize,
    spec: &ProbeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Option<f64>, usize, usize)> {
    let split = stratified_split(labels, n_classes, spec.train_fraction, rng)?;
    let d = features.cols();
    let (mut mean, mut sd) = (vec![0.0; d], vec![0.0; d]);
    for &i in &split.train {
        for (j, v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    let nt = split.train.len() as f64;
    mean.iter_mut().for_each(|m| *m /= nt);
    for &i in &split.train {
        for (j, v) in features.row(i).iter().enumerate() {
            sd[j] += (v - mean[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / nt).sqrt());
    let z = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, v)| if sd[j] > 1e-12 { (v - mean[j]) / sd[j] } else { 0.0 })
            .collect()
    };
    let xt: Vec<Vec<f64>> = split.train.iter().map(|&i| z(i)).collect();
    let yt: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let model = train(&xt, &yt, n_classes, spec);

    let mut correct = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    let (mut margins, mut positive) = (Vec::new(), Vec::new());
    for &i in &split.val {
        let s = model.scores(&z(i));
        let pred = s
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > s[best] { k } else { best });
        total[labels[i]] += 1;
        if pred == labels[i] {
            correct[labels[i]] += 1;
        }
        if n_classes == 2 {
            margins.push(s[1] - s[0]);
            positive.push(labels[i] == 1);
        }
    }
    let accuracy = (0..n_classes)
        .map(|k| correct[k] as f64 / total[k] as f64)
        .sum::<f64>()
        / n_classes as f64;
    let auc = if n_classes == 2 { auroc(&margins, &positive) } else { None };
    Ok((accuracy, auc, split.train.len(), split.val.len()))
}

/// Train a probe on `features` (one row per observation) and a matching
/// permutation control. Labels may be any integers; they are densified.
pub fn train_linear_probe(features: &Matrix, labels: &[usize], spec: &ProbeSpec) -> Result<ProbeResult> {
    spec.check()?;
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let classes: BTreeMap<usize, usize> = labels
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, &l)| (l, i))
        .collect();
    let n_classes = classes.len();
    if n_classes < 2 {
        return Err(Error::Resample("probe needs at least two classes".into()));
    }
    let dense: Vec<usize> = labels.iter().map(|l| classes[l]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (accuracy, auroc, n_train, n_val) = fit_and_score(features, &dense, n_classes, spec, &mut rng)?;

    let mut shuffled = dense.clone();
    let mut perm_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_5EED);
    shuffled.shuffle(&mut perm_rng);
    let (permutation_accuracy, permutation_auroc, _, _) =
        fit_and_score(features, &shuffled, n_classes, spec, &mut perm_rng)?;

    let chance = 1.0 / n_classes as f64;
    let chance_band = 3.0 * (chance * (1.0 - chance) / n_val as f64).sqrt();
    Ok(ProbeResult {
        accuracy,
        auroc,
        permutation_accuracy,
        permutation_auroc,
        n_classes,
        n_train,
        n_val,
        chance,
        chance_band,
    })
}

fn target_token(e: &TaskExample, i: usize) -> Result<u32> {
    let pos = e.target_positions();
    let p = *pos
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("example has no target position {i}")))?;
    Ok(e.prompt_tokens[p])
}

/// Label plus the position its features are read from; one entry per row.
fn rows_for(e: &TaskExample, target: ProbeTarget) -> Result<Vec<(usize, usize)>> {
    let last = e.len() - 1;
    Ok(match target {
        ProbeTarget::NextNumeral => vec![(e.correct_token as usize, last)],
        ProbeTarget::IthNumeral(i) => vec![(target_token(e, i)? as usize, last)],
        ProbeTarget::PreviousNumeral => {
            let n = e.target_positions().len();
            if n == 0 {
                return Err(Error::InvalidArgument("example has no target positions".into()));
            }
            vec![(target_token(e, n - 1)? as usize, last)]
        }
        ProbeTarget::FullSequence => {
            let toks: Vec<u32> = e.target_positions().iter().map(|&p| e.prompt_tokens[p]).collect();
            if toks.is_empty() {
                return Err(Error::InvalidArgument("example has no target positions".into()));
            }
            // Stable id for the tuple: a hash folded into usize.
            let h = toks.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &t| (h ^ t as u64).wrapping_mul(0x100_0000_01b3));
            vec![(h as usize, last)]
        }
        ProbeTarget::PriorOccurrence => {
            let mut seen = HashSet::new();
            e.prompt_tokens
                .iter()
                .enumerate()
                .map(|(p, t)| (usize::from(!seen.insert(*t)), p))
                .collect()
        }
    })
}

/// Feature matrix and labels for one layer.
pub fn probe_features(
    model: &ModelBundle,
    ds: &TaskDataset,
    spec: &ProbeSpec,
    layer: usize,
    exec: Exec,
) -> Result<(Matrix, Vec<usize>)> {
    let hook = match spec.source {
        ProbeSource::ResidPost => HookPoint::new(layer, Site::ResidPost),
        ProbeSource::HeadValues(c) => {
            c.validate(&model.config)?;
            let h = c.head.ok_or_else(|| Error::InvalidArgument(format!("{c} is not a head")))?;
            HookPoint::head(c.layer, Site::HeadV, h)
        }
    };
    hook.validate(&model.config)?;
    let hooks = HookSet::new().with(hook);
    let none = Interventions::none();
    let per_example = exec.try_map(&ds.examples, |e| {
        let rows = rows_for(e, spec.target)?;
        let out = model.forward(&e.prompt_tokens, &hooks, &none)?;
        let t = out.cache.get(&hook)?;
        Ok::<_, Error>(
            rows.into_iter()
                .map(|(label, p)| (label, t.row(p).iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect::<Vec<_>>(),
        )
    })?;
    let (labels, feats): (Vec<usize>, Vec<Vec<f64>>) = per_example.into_iter().flatten().unzip();
    Ok((Matrix::from_rows(&feats)?, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub layer: usize,
    pub result: ProbeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub model: String,
    pub spec: ProbeSpec,
    pub dataset_hash: String,
    pub points: Vec<ProbePoint>,
}

impl ProbeCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,accuracy,auroc,permutation_accuracy,chance,n_train,n_val\n");
        for p in &self.points {
            let r = &p.result;
            let auc = r.auroc.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                s,
                "{},{:.6},{auc},{:.6},{:.6},{},{}",
                p.layer, r.accuracy, r.permutation_accuracy, r.chance, r.n_train, r.n_val
            );
        }
        s
    }
}

/// One probe per layer of `spec.layers` (or per layer of the model).
pub fn probe_layer_curve(model: &ModelBundle, ds: &TaskDataset, spec: &ProbeSpec, exec: Exec) -> Result<ProbeCurve> {
    spec.check()?;
    let nl = model.config.n_layers;
    let layers: Vec<usize> = match (spec.source, spec.layers) {
        (ProbeSource::HeadValues(c), _) => vec![c.layer],
        (_, Some((lo, hi))) if lo <= hi && hi < nl => (lo..=hi).collect(),
        (_, Some((lo, hi))) => {
            return Err(Error::InvalidArgument(format!("layer range {lo}..={hi} invalid for {nl} layers")))
        }
        (_, None) => (0..nl).collect(),
    };
    let features = layers
        .iter()
        .map(|&l| probe_features(model, ds, spec, l, exec))
        .collect::<Result<Vec<_>>>()?;
    let results = exec.try_map(&features, |(x, y)| train_linear_probe(x, y, spec))?;
    Ok(ProbeCurve {
        model: model.name.clone(),
        spec: *spec,
        dataset_hash: ds.content_hash.clone(),
        points: layers.into_iter().zip(results).map(|(layer, result)| ProbePoint { layer, result }).collect(),
    })
}

/// Two Gaussian blobs at ±`direction` with isotropic noise of `sigma`.
pub fn separable_fixture(n: usize, dim: usize, sigma: f64, seed: u64) -> (Matrix, Vec<usize>) {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let direction: Vec<f64> = (0..dim).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        rows.push(direction.iter().map(|d| sign * d + normal.sample(&mut rng)).collect());
        labels.push(y);
    }
    (Matrix::from_rows(&rows).expect("rectangular"), labels)
}
