// SPDX-License-Identifier: MIT OR Apache-2.0

//! Influence-weighted functional alignment between a teacher and a student.
//!
//! Each component's influence is its normalized mean-ablation drop. Each
//! teacher component is matched to similar student components of the same
//! kind, and the score averages `S · (1 − |I_T − I_S|)` over the matches.

mod influence;
mod matching;
mod noise;
mod robustness;
mod score;
mod similarity;

pub use influence::{component_drops, influence_scores, InfluenceEntry, InfluenceTable, Normalization};
pub use matching::{hungarian_min, match_components, MatchCandidate, MatchSet, MatchedTeacher, Strategy};
pub use noise::{noise_injection_experiment, plateau_analysis, sigma_grid, NoiseCurve, NoisePoint};
pub use robustness::{
    compression_brittleness, robustness_from_drops, robustness_summary, BrittlenessRow, ComponentDrop,
    CompressionPair, RobustnessSummary,
};
pub use score::{
    align_models, alignment_score, timestamp_now, AlignOptions, AlignmentInputs, AlignmentReport, ModelSide,
    PairRecord,
};
pub use similarity::{component_profile, component_similarity, ComponentProfile, HeadSite, PairSimilarities};
