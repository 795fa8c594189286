// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    component_drops, component_profile, match_components, ComponentProfile, HeadSite, InfluenceTable, MatchSet,
    Normalization, PairSimilarities, Strategy,
};
use crate::error::{Error, Result};
use crate::intervention::{edge_source_hooks, CorruptedMeans, RunConfig};
use crate::model::{ComponentId, ModelBundle};
use crate::task::TaskDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub teacher: ComponentId,
    pub student: ComponentId,
    pub similarity: f64,
    pub teacher_influence: f64,
    pub student_influence: f64,
    /// 1 except under soft top-k.
    pub weight: f64,
    /// `weight · S · (1 − |I_T − I_S|)`.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    #[serde(rename = "A")]
    pub score: f64,
    pub n_matched: usize,
    pub pairs: Vec<PairRecord>,
    pub normalization: Normalization,
    pub strategy: Strategy,
    pub top_k: Option<usize>,
    pub head_site: Option<HeadSite>,
    pub reduced_head_similarity: bool,
    pub teacher_model: String,
    pub student_model: String,
    pub teacher_digest: String,
    pub student_digest: String,
    pub dataset_hash: String,
    pub timestamp: String,
}

impl AlignmentReport {
    /// Score recomputed from the per-pair records.
    pub fn recompute(&self) -> f64 {
        if self.n_matched == 0 {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.contribution).sum::<f64>() / self.n_matched as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("teacher,student,similarity,teacher_influence,student_influence,weight,contribution\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
                p.teacher, p.student, p.similarity, p.teacher_influence, p.student_influence, p.weight, p.contribution
            );
        }
        s
    }
}

pub fn timestamp_now() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}

/// `A = (1/|M|) Σ S · (1 − |I_T − I_S|)`, with soft top-k using each
/// teacher's weighted expectation. Model fields are left blank.
pub fn alignment_score(
    matches: &MatchSet,
    teacher_influence: &InfluenceTable,
    student_influence: &InfluenceTable,
) -> Result<AlignmentReport> {
    if matches.pairs.is_empty() {
        return Err(Error::InvalidArgument("no matched pairs to score".into()));
    }
    if teacher_influence.normalization != student_influence.normalization {
        return Err(Error::InvalidArgument("influences use different normalizations".into()));
    }
    let lookup = |t: &InfluenceTable, c: ComponentId| {
        t.get(c).ok_or_else(|| Error::CacheMiss(format!("influence of {c} in {}", t.model)))
    };
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for m in &matches.pairs {
        let it = lookup(teacher_influence, m.teacher)?;
        let mut inner = 0.0;
        for c in &m.candidates {
            let is = lookup(student_influence, c.student)?;
            let contribution = c.weight * c.similarity * (1.0 - (it - is).abs());
            inner += contribution;
            pairs.push(PairRecord {
                teacher: m.teacher,
                student: c.student,
                similarity: c.similarity,
                teacher_influence: it,
                student_influence: is,
                weight: c.weight,
                contribution,
            });
        }
        total += inner;
    }
    let n = matches.pairs.len();
    Ok(AlignmentReport {
        score: total / n as f64,
        n_matched: n,
        pairs,
        normalization: teacher_influence.normalization,
        strategy: matches.strategy,
        top_k: matches.top_k,
        head_site: None,
        reduced_head_similarity: false,
        teacher_model: teacher_influence.model.clone(),
        student_model: student_influence.model.clone(),
        teacher_digest: String::new(),
        student_digest: String::new(),
        dataset_hash: teacher_influence.dataset_hash.clone(),
        timestamp: timestamp_now(),
    })
}

/// Everything one model contributes to the metric: raw ablation drops and
/// the activation profile.
#[derive(Debug, Clone)]
pub struct ModelSide {
    pub model: String,
    pub digest: String,
    pub base_logit_diff: f64,
    pub drops: Vec<(ComponentId, f64)>,
    pub profile: ComponentProfile,
    pub dataset_hash: String,
}

impl ModelSide {
    /// Corrupted means, ablation drops and activation profile of `model`
    /// under `run` (including its noise, if any).
    pub fn compute(
        model: &ModelBundle,
        ds: &TaskDataset,
        corrupted: &TaskDataset,
        head_site: HeadSite,
        run: &RunConfig,
    ) -> Result<Self> {
        let means = CorruptedMeans::compute_run(model, corrupted, &edge_source_hooks(&model.config), run)?;
        Self::with_means(model, ds, &means, head_site, run)
    }

    /// As [`ModelSide::compute`], with precomputed corrupted means.
    pub fn with_means(
        model: &ModelBundle,
        ds: &TaskDataset,
        means: &CorruptedMeans,
        head_site: HeadSite,
        run: &RunConfig,
    ) -> Result<Self> {
        let (base, drops) = component_drops(model, ds, means, run)?;
        let profile = component_profile(model, ds, head_site, run)?;
        Ok(Self {
            model: model.name.clone(),
            digest: model.digest.clone(),
            base_logit_diff: base,
            drops,
            profile,
            dataset_hash: ds.content_hash.clone(),
        })
    }

    pub fn influence(&self, normalization: Normalization) -> Result<InfluenceTable> {
        InfluenceTable::from_drops(&self.model, self.base_logit_diff, &self.drops, normalization, &self.dataset_hash)
    }
}

/// Variant knobs of the metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub normalization: Normalization,
    pub strategy: Strategy,
    pub top_k: Option<usize>,
    pub head_site: HeadSite,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::Max,
            strategy: Strategy::Greedy,
            top_k: None,
            head_site: HeadSite::Output,
        }
    }
}

/// Teacher and student sides plus their pairwise similarities; any
/// normalization and strategy can be scored from here without new
/// forward passes.
#[derive(Debug, Clone)]
pub struct AlignmentInputs {
    pub teacher: ModelSide,
    pub student: ModelSide,
    pub similarities: PairSimilarities,
}

impl AlignmentInputs {
    pub fn new(teacher: ModelSide, student: ModelSide, run: &RunConfig) -> Result<Self> {
        if teacher.dataset_hash != student.dataset_hash {
            return Err(Error::InvalidArgument("teacher and student were profiled on different datasets".into()));
        }
        let similarities = PairSimilarities::compute(&teacher.profile, &student.profile, run)?;
        Ok(Self { teacher, student, similarities })
    }

    pub fn report(&self, normalization: Normalization, strategy: Strategy, top_k: Option<usize>) -> Result<AlignmentReport> {
        let ti = self.teacher.influence(normalization)?;
        let si = self.student.influence(normalization)?;
        let matches = match_components(&ti, &si, &self.similarities, strategy, top_k)?;
        let mut r = alignment_score(&matches, &ti, &si)?;
        r.head_site = Some(self.teacher.profile.head_site);
        r.reduced_head_similarity = self.similarities.reduced_head_similarity;
        r.teacher_digest = self.teacher.digest.clone();
        r.student_digest = self.student.digest.clone();
        Ok(r)
    }

    /// All normalization × strategy combinations.
    pub fn variant_grid(&self, top_k: Option<usize>) -> Result<Vec<AlignmentReport>> {
        let mut out = Vec::with_capacity(9);
        for n in Normalization::ALL {
            for s in Strategy::all_default() {
                out.push(self.report(n, s, top_k)?);
            }
        }
        Ok(out)
    }
}

/// Full pipeline for one teacher/student pair.
pub fn align_models(
    teacher: &ModelBundle,
    student: &ModelBundle,
    ds: &TaskDataset,
    corrupted: &TaskDataset,
    opts: &AlignOptions,
    run: &RunConfig,
) -> Result<AlignmentReport> {
    let t = ModelSide::compute(teacher, ds, corrupted, opts.head_site, run)?;
    // Without noise a side depends only on the weights and the data.
    let s = if student.digest == teacher.digest && run.noise.is_none() {
        ModelSide { model: student.name.clone(), ..t.clone() }
    } else {
        ModelSide::compute(student, ds, corrupted, opts.head_site, run)?
    };
    AlignmentInputs::new(t, s, run)?.report(opts.normalization, opts.strategy, opts.top_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{MatchCandidate, MatchedTeacher};

    #[test]
    fn hand_example_scores_point_six_five() {
        let (a, b) = (ComponentId::head(0, 0), ComponentId::head(0, 1));
        let ti = InfluenceTable::from_drops("t", 1.0, &[(a, 1.0), (b, 0.4)], Normalization::Max, "h").unwrap();
        let si = InfluenceTable::from_drops("s", 1.0, &[(a, 1.0), (b, 0.8)], Normalization::Max, "h").unwrap();
        let m = MatchSet {
            strategy: Strategy::Greedy,
            top_k: None,
            pairs: vec![
                MatchedTeacher { teacher: a, candidates: vec![MatchCandidate { student: a, similarity: 1.0, weight: 1.0 }] },
                MatchedTeacher { teacher: b, candidates: vec![MatchCandidate { student: b, similarity: 0.5, weight: 1.0 }] },
            ],
        };
        let r = alignment_score(&m, &ti, &si).unwrap();
        assert!((r.score - 0.65).abs() < 1e-12);
        assert!((r.recompute() - r.score).abs() < 1e-12);
        assert!(r.to_csv().lines().count() == 3);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("A").is_some());
    }

    #[test]
    fn empty_match_set_is_rejected() {
        let a = ComponentId::head(0, 0);
        let t = InfluenceTable::from_drops("t", 1.0, &[(a, 1.0)], Normalization::Max, "h").unwrap();
        let m = MatchSet { strategy: Strategy::Greedy, top_k: None, pairs: vec![] };
        assert!(alignment_score(&m, &t, &t).is_err());
    }
}
