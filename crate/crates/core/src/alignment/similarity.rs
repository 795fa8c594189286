// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::pca_similarity;
use crate::error::{Error, Result};
use crate::intervention::RunConfig;
use crate::model::{ComponentId, ComponentKind, HookPoint, HookSet, Interventions, ModelBundle, Site};
use crate::task::TaskDataset;
use crate::tensor_math::{cosine_similarity, pca_top3, Matrix, PcaBasis};

/// Per-head activation compared across models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSite {
    /// The head's write into the residual stream.
    #[default]
    Output,
    Value,
    Pattern,
}

impl HeadSite {
    pub fn name(self) -> &'static str {
        match self {
            HeadSite::Output => "head_out",
            HeadSite::Value => "head_v",
            HeadSite::Pattern => "head_pattern",
        }
    }

    fn site(self) -> Site {
        match self {
            HeadSite::Output => Site::HeadOut,
            HeadSite::Value => Site::HeadV,
            HeadSite::Pattern => Site::HeadPattern,
        }
    }
}

impl FromStr for HeadSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [HeadSite::Output, HeadSite::Value, HeadSite::Pattern]
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head site `{s}` (head_out, head_v, head_pattern)")))
    }
}

/// What the similarity measure reads from one model over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentProfile {
    pub model: String,
    pub head_site: HeadSite,
    /// Dataset-mean activation matrix of each head, flattened; length
    /// groups are concatenated in ascending length order.
    pub head_means: BTreeMap<ComponentId, Vec<f64>>,
    /// Per-position L2 norms of the same mean matrices.
    pub head_norm_profiles: BTreeMap<ComponentId, Vec<f64>>,
    /// Top-3 principal directions of each MLP's output.
    pub mlp_bases: BTreeMap<ComponentId, PcaBasis>,
}

/// Record every head and MLP output over `ds` (with the run's noise).
pub fn component_profile(
    model: &ModelBundle,
    ds: &TaskDataset,
    head_site: HeadSite,
    run: &RunConfig,
) -> Result<ComponentProfile> {
    let cfg = &model.config;
    let comps = ComponentId::all(cfg);
    let hook_of = |c: &ComponentId| match c.head {
        Some(h) => HookPoint::head(c.layer, head_site.site(), h),
        None => HookPoint::new(c.layer, Site::MlpOut),
    };
    let hooks: HookSet = comps.iter().map(hook_of).collect();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let caches = run.exec.try_map(&idx, |&i| {
        let iv = Interventions::none().with_noise(run.noise_for(i));
        model.forward(&ds.examples[i].prompt_tokens, &hooks, &iv).map(|o| o.cache)
    })?;
    let groups = ds.length_groups();

    let mut head_means = BTreeMap::new();
    let mut head_norm_profiles = BTreeMap::new();
    let mut mlp_rows: BTreeMap<ComponentId, Vec<Vec<f64>>> = BTreeMap::new();
    for c in &comps {
        let hook = hook_of(c);
        if c.is_head() {
            let (mut flat, mut norms) = (Vec::new(), Vec::new());
            for members in groups.values() {
                let first = caches[members[0]].get(&hook)?;
                let mut acc = vec![0.0f64; first.data().len()];
                for &i in members {
                    for (a, v) in acc.iter_mut().zip(caches[i].get(&hook)?.data()) {
                        *a += *v as f64;
                    }
                }
                let n = members.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                for row in acc.chunks(first.cols()) {
                    norms.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
                flat.extend(acc);
            }
            head_means.insert(*c, flat);
            head_norm_profiles.insert(*c, norms);
        } else {
            let rows = mlp_rows.entry(*c).or_default();
            for cache in &caches {
                let t = cache.get(&hook)?;
                for p in 0..t.rows() {
                    rows.push(t.row(p).iter().map(|&v| v as f64).collect());
                }
            }
        }
    }
    let mlps: Vec<(ComponentId, Vec<Vec<f64>>)> = mlp_rows.into_iter().collect();
    let bases = run.exec.try_map(&mlps, |(_, rows)| pca_top3(&Matrix::from_rows(rows)?))?;
    let mlp_bases = mlps.iter().map(|(c, _)| *c).zip(bases).collect();
    Ok(ComponentProfile {
        model: model.name.clone(),
        head_site,
        head_means,
        head_norm_profiles,
        mlp_bases,
    })
}

/// Cosine clamped to [0, 1]; a zero vector scores 0.
fn clamped_cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    match cosine_similarity(u, v) {
        Ok(c) => Ok(c.max(0.0)),
        Err(Error::DegenerateInput(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Similarity of one teacher component and one student component of the
/// same kind. The flag is set when head activations differ in width and
/// per-position norm profiles were compared instead.
pub fn component_similarity(
    teacher: ComponentId,
    student: ComponentId,
    t: &ComponentProfile,
    s: &ComponentProfile,
) -> Result<(f64, bool)> {
    if teacher.kind != student.kind {
        return Err(Error::InvalidArgument(format!("cannot compare {teacher} with {student}: different kinds")));
    }
    let missing = |c: ComponentId, p: &ComponentProfile| Error::CacheMiss(format!("{c} in profile of {}", p.model));
    match teacher.kind {
        ComponentKind::AttentionHead => {
            let (a, b) = (
                t.head_means.get(&teacher).ok_or_else(|| missing(teacher, t))?,
                s.head_means.get(&student).ok_or_else(|| missing(student, s))?,
            );
            if a.len() == b.len() {
                return Ok((clamped_cosine(a, b)?, false));
            }
            let (pa, pb) = (&t.head_norm_profiles[&teacher], &s.head_norm_profiles[&student]);
            if pa.len() != pb.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{teacher} and {student} were profiled over different prompt positions"
                )));
            }
            Ok((clamped_cosine(pa, pb)?, true))
        }
        ComponentKind::Mlp => {
            let (a, b) = (
                t.mlp_bases.get(&teacher).ok_or_else(|| missing(teacher, t))?,
                s.mlp_bases.get(&student).ok_or_else(|| missing(student, s))?,
            );
            Ok((pca_similarity(a, b)?.0, false))
        }
    }
}

/// Similarities of every same-kind (teacher, student) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarities {
    pub teacher: Vec<ComponentId>,
    pub student: Vec<ComponentId>,
    /// `values[i][j]`; `None` across kinds.
    pub values: Vec<Vec<Option<f64>>>,
    pub reduced_head_similarity: bool,
}

impl PairSimilarities {
    pub fn get(&self, teacher: ComponentId, student: ComponentId) -> Option<f64> {
        let i = self.teacher.iter().position(|c| *c == teacher)?;
        let j = self.student.iter().position(|c| *c == student)?;
        self.values[i][j]
    }

    pub fn compute(t: &ComponentProfile, s: &ComponentProfile, run: &RunConfig) -> Result<Self> {
        let teacher: Vec<ComponentId> = t.mlp_bases.keys().chain(t.head_means.keys()).cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let student: Vec<ComponentId> = s.mlp_bases.keys().chain(s.head_means.keys()).cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let rows = run.exec.try_map(&teacher, |&tc| {
            student
                .iter()
                .map(|&sc| {
                    if tc.kind == sc.kind {
                        component_similarity(tc, sc, t, s).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let reduced = rows.iter().flatten().flatten().any(|(_, r)| *r);
        Ok(Self {
            values: rows.into_iter().map(|r| r.into_iter().map(|x| x.map(|(v, _)| v)).collect()).collect(),
            teacher,
            student,
            reduced_head_similarity: reduced,
        })
    }

    /// Build from explicit values (tests and external inputs).
    pub fn from_values(teacher: Vec<ComponentId>, student: Vec<ComponentId>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != teacher.len() || values.iter().any(|r| r.len() != student.len()) {
            return Err(Error::DimensionMismatch("similarity values do not match component lists".into()));
        }
        let values = teacher
            .iter()
            .zip(values)
            .map(|(tc, row)| {
                student
                    .iter()
                    .zip(row)
                    .map(|(sc, v)| (tc.kind == sc.kind).then_some(v))
                    .collect()
            })
            .collect();
        Ok(Self { teacher, student, values, reduced_head_similarity: false })
    }
}
