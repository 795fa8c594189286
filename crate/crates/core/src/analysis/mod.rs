// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-component analyses: residual-stream attribution, PCA similarity
//! between MLPs, linear probes, and successor/copy scores.

mod attribution;
mod probe;
mod similarity;
mod successor;

pub use attribution::{mlp_attribution, AttributionTable, BlockContribution, BlockKind};
pub use probe::{
    auroc, probe_features, probe_layer_curve, separable_fixture, train_linear_probe, ProbeCurve, ProbePoint,
    ProbeResult, ProbeSource, ProbeSpec, ProbeTarget,
};
pub use similarity::{
    collect_layer_activations, collect_mlp_activations, layer_bases, mlp_similarity_matrix, pca_similarity,
    LayerActivations, PositionSelect, SimilarityMatrix,
};
pub use successor::{successor_copy_scores, SuccessorCopyScores};
