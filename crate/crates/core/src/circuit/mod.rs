// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit discovery by iterative mean-ablation pruning, edge search by
//! path patching, and the completeness / faithfulness / minimality checks.
//!
//! Drops are fractions of the clean baseline: `(base − ablated) / |base|`.
//! A node survives pruning when its drop is at least the threshold; an edge
//! survives when its path-patched score falls below `(1 − threshold)·base`.

mod graph;
mod sweep;

use serde::{Deserialize, Serialize};

pub use graph::CircuitGraph;
pub use sweep::{sweep_csv, threshold_sweep, SweepMode, SweepRow};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::intervention::{
    ablate_set_and_score, baseline, clean_caches, edge_source_hooks, path_patch_edges, CorruptedMeans, EdgeDst,
    EdgeId, EdgeSlot, EdgeSrc, RunConfig,
};
use crate::model::{ComponentId, ModelBundle, ModelConfig};
use crate::task::TaskDataset;

/// Corrupted means of every edge source (component outputs and embedding),
/// enough for node ablation and edge patching alike.
pub fn component_means(model: &ModelBundle, corrupted: &TaskDataset, exec: Exec) -> Result<CorruptedMeans> {
    CorruptedMeans::compute(model, corrupted, &edge_source_hooks(&model.config), exec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscoveryOptions {
    pub threshold: f64,
    /// Test each component with nothing else ablated instead of holding
    /// previously pruned components ablated.
    pub independent: bool,
    /// Search edges between all components rather than retained nodes only.
    pub dense_edges: bool,
    pub run: RunConfig,
}

impl DiscoveryOptions {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            independent: false,
            dense_edges: false,
            run: RunConfig::default(),
        }
    }

    pub fn with_run(mut self, run: RunConfig) -> Self {
        self.run = run;
        self
    }

    fn check(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Domain(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Backward,
    Forward,
}

/// One retention test during pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTest {
    pub component: ComponentId,
    pub phase: Phase,
    pub logit_diff: f64,
    pub drop: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDiscovery {
    pub nodes: Vec<ComponentId>,
    pub base: f64,
    pub trace: Vec<NodeTest>,
}

fn drop_frac(base: f64, score: f64) -> f64 {
    (base - score) / base.abs()
}

/// Baseline Δℓ, rejecting tasks the model does not solve.
pub fn solved_baseline(model: &ModelBundle, ds: &TaskDataset, run: &RunConfig) -> Result<f64> {
    let base = baseline(model, ds, run)?.mean;
    if base <= 0.0 {
        return Err(Error::TaskUnsolved(base));
    }
    Ok(base)
}

/// Prune components layer by layer, last layer first, then re-test the
/// survivors first layer first. Within a layer the MLP is tested before the
/// heads. Pruned components stay ablated for later tests unless
/// `opts.independent` is set.
pub fn discover_nodes_with(
    model: &ModelBundle,
    ds: &TaskDataset,
    means: &CorruptedMeans,
    opts: &DiscoveryOptions,
) -> Result<NodeDiscovery> {
    opts.check()?;
    let cfg = &model.config;
    let base = solved_baseline(model, ds, &opts.run)?;
    let mut pruned: Vec<ComponentId> = Vec::new();
    let mut trace = Vec::new();

    let mut test = |c: ComponentId, pruned: &[ComponentId], phase: Phase| -> Result<bool> {
        let mut set: Vec<ComponentId> = if opts.independent { Vec::new() } else { pruned.to_vec() };
        set.push(c);
        let score = ablate_set_and_score(model, ds, &set, means, &opts.run)?.mean;
        let drop = drop_frac(base, score);
        let retained = drop >= opts.threshold;
        trace.push(NodeTest { component: c, phase, logit_diff: score, drop, retained });
        Ok(retained)
    };

    let mut kept = Vec::new();
    for layer in (0..cfg.n_layers).rev() {
        for c in ComponentId::in_layer(cfg, layer) {
            if test(c, &pruned, Phase::Backward)? {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
    }
    kept.sort();
    if !opts.independent {
        let mut survivors = Vec::new();
        for c in kept {
            if test(c, &pruned, Phase::Forward)? {
                survivors.push(c);
            } else {
                pruned.push(c);
            }
        }
        kept = survivors;
    }
    Ok(NodeDiscovery { nodes: kept, base, trace })
}

/// Retained components at `threshold` with cumulative pruning.
pub fn discover_nodes(
    model: &ModelBundle,
    ds: &TaskDataset,
    corrupted: &TaskDataset,
    threshold: f64,
    run: &RunConfig,
) -> Result<Vec<ComponentId>> {
    let means = component_means(model, corrupted, run.exec)?;
    Ok(discover_nodes_with(model, ds, &means, &DiscoveryOptions::new(threshold).with_run(*run))?.nodes)
}

/// Candidate edges: sources are the embedding plus `nodes`, destinations
/// are `nodes` plus the logits, with every slot the destination reads.
pub fn candidate_edges(cfg: &ModelConfig, nodes: &[ComponentId]) -> Vec<EdgeId> {
    let mut srcs = vec![EdgeSrc::Input];
    srcs.extend(nodes.iter().map(|c| EdgeSrc::Component(*c)));
    let mut dsts: Vec<(EdgeDst, &[EdgeSlot])> = nodes
        .iter()
        .map(|c| {
            let slots: &[EdgeSlot] = if c.is_head() {
                &[EdgeSlot::Query, EdgeSlot::Key, EdgeSlot::Value]
            } else {
                &[EdgeSlot::MlpIn]
            };
            (EdgeDst::Component(*c), slots)
        })
        .collect();
    dsts.push((EdgeDst::Output, &[EdgeSlot::DirectOut]));
    let mut out = Vec::new();
    for src in &srcs {
        for (dst, slots) in &dsts {
            for slot in *slots {
                let e = EdgeId::new(*src, *dst, *slot);
                if e.validate(cfg).is_ok() {
                    out.push(e);
                }
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub edge: EdgeId,
    pub logit_diff: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDiscovery {
    pub edges: Vec<EdgeId>,
    pub base: f64,
    pub scores: Vec<EdgeScore>,
}

impl EdgeDiscovery {
    /// Re-threshold the stored scores without new forward passes.
    pub fn retained_at(&self, threshold: f64) -> Vec<EdgeId> {
        retain_edges(&self.scores, self.base, threshold)
    }
}

fn retain_edges(scores: &[EdgeScore], base: f64, threshold: f64) -> Vec<EdgeId> {
    scores
        .iter()
        .filter(|s| s.logit_diff < (1.0 - threshold) * base)
        .map(|s| s.edge)
        .collect()
}

/// Path-patch every candidate edge around `nodes` and keep those whose
/// removal costs at least the threshold.
pub fn discover_edges(
    model: &ModelBundle,
    ds: &TaskDataset,
    nodes: &[ComponentId],
    means: &CorruptedMeans,
    opts: &DiscoveryOptions,
) -> Result<EdgeDiscovery> {
    opts.check()?;
    let cfg = &model.config;
    for c in nodes {
        c.validate(cfg)?;
    }
    let base = solved_baseline(model, ds, &opts.run)?;
    let universe = if opts.dense_edges { ComponentId::all(cfg) } else { nodes.to_vec() };
    let candidates = candidate_edges(cfg, &universe);
    let caches = clean_caches(model, ds, &opts.run)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for edge in candidates {
        let score = path_patch_edges(model, ds, &[edge], means, Some(&caches), &opts.run)?.mean;
        scores.push(EdgeScore { edge, logit_diff: score, drop: drop_frac(base, score) });
    }
    let edges = retain_edges(&scores, base, opts.threshold);
    Ok(EdgeDiscovery { edges, base, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalityCheck {
    pub component: ComponentId,
    pub drop: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitEvaluation {
    pub base_logit_diff: f64,
    /// Mean Δℓ with everything outside the circuit ablated.
    pub circuit_only_logit_diff: f64,
    pub completeness_drop_pct: f64,
    /// Mean Δℓ with only the circuit ablated.
    pub faithfulness_logit_diff: f64,
    pub faithfulness_pct: f64,
    pub minimality: Vec<MinimalityCheck>,
}

impl CircuitEvaluation {
    pub fn minimal(&self) -> bool {
        self.minimality.iter().all(|m| m.pass)
    }
}

fn complement(cfg: &ModelConfig, circuit: &[ComponentId]) -> Vec<ComponentId> {
    ComponentId::all(cfg).into_iter().filter(|c| !circuit.contains(c)).collect()
}

/// Completeness and faithfulness only; tolerates an empty circuit.
pub(crate) fn completeness_faithfulness(
    model: &ModelBundle,
    ds: &TaskDataset,
    circuit: &[ComponentId],
    means: &CorruptedMeans,
    run: &RunConfig,
) -> Result<(f64, f64)> {
    let rest = complement(&model.config, circuit);
    let circuit_only = ablate_set_and_score(model, ds, &rest, means, run)?.mean;
    let faithful = ablate_set_and_score(model, ds, circuit, means, run)?.mean;
    Ok((circuit_only, faithful))
}

/// Ablate the complement to measure completeness, ablate the circuit to
/// measure faithfulness, and re-test each node with the complement held
/// ablated. Drops are relative to the clean baseline.
pub fn evaluate_circuit(
    model: &ModelBundle,
    ds: &TaskDataset,
    circuit: &[ComponentId],
    means: &CorruptedMeans,
    threshold: f64,
    run: &RunConfig,
) -> Result<CircuitEvaluation> {
    if circuit.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty circuit".into()));
    }
    for c in circuit {
        c.validate(&model.config)?;
    }
    let base = baseline(model, ds, run)?.mean;
    if base == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    let (circuit_only, faithful) = completeness_faithfulness(model, ds, circuit, means, run)?;
    let rest = complement(&model.config, circuit);
    let mut minimality = Vec::with_capacity(circuit.len());
    for c in circuit {
        let mut set = rest.clone();
        set.push(*c);
        let score = ablate_set_and_score(model, ds, &set, means, run)?.mean;
        let drop = drop_frac(base, score);
        minimality.push(MinimalityCheck { component: *c, drop, pass: drop >= threshold });
    }
    Ok(CircuitEvaluation {
        base_logit_diff: base,
        circuit_only_logit_diff: circuit_only,
        completeness_drop_pct: 100.0 * drop_frac(base, circuit_only),
        faithfulness_logit_diff: faithful,
        faithfulness_pct: 100.0 * faithful / base.abs(),
        minimality,
    })
}

/// Full pipeline: nodes, edges, evaluation.
pub fn discover_circuit(
    model: &ModelBundle,
    ds: &TaskDataset,
    means: &CorruptedMeans,
    opts: &DiscoveryOptions,
) -> Result<CircuitGraph> {
    let nodes = discover_nodes_with(model, ds, means, opts)?;
    let edges = discover_edges(model, ds, &nodes.nodes, means, opts)?;
    let evaluation = if nodes.nodes.is_empty() {
        None
    } else {
        Some(evaluate_circuit(model, ds, &nodes.nodes, means, opts.threshold, &opts.run)?)
    };
    Ok(CircuitGraph {
        model: model.name.clone(),
        model_digest: model.digest.clone(),
        nodes: nodes.nodes,
        edges: edges.edges,
        threshold: opts.threshold,
        base_mean_logit_diff: nodes.base,
        dataset_hash: ds.content_hash.clone(),
        evaluation,
        node_trace: nodes.trace,
        edge_scores: edges.scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureTag;

    #[test]
    fn candidate_edges_respect_topology() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_positions: 8,
            layernorm_epsilon: 1e-5,
            architecture_tag: ArchitectureTag::Gpt2Family,
        };
        let nodes = [ComponentId::head(0, 1), ComponentId::head(1, 0), ComponentId::mlp(1)];
        let edges = candidate_edges(&cfg, &nodes);
        let names: Vec<String> = edges.iter().map(|e| e.to_string()).collect();
        assert!(names.contains(&"L0.H1->L1.H0[key]".to_string()));
        assert!(names.contains(&"L1.H0->L1.MLP[mlp_in]".to_string()));
        assert!(names.contains(&"input->output[direct_out]".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("L1.MLP->L1")));
        assert!(!names.iter().any(|n| n.starts_with("L1.H0->L1.H0")));
        // 3 input->head slots x2 heads, input->mlp, input->output; L0.H1: 3 + 1 + 1;
        // L1.H0: mlp + output; L1.MLP: output.
        assert_eq!(edges.len(), 8 + 5 + 2 + 1);
    }

    #[test]
    fn thresholds_outside_unit_interval_are_rejected() {
        assert!(DiscoveryOptions::new(0.0).check().is_err());
        assert!(DiscoveryOptions::new(1.0).check().is_err());
        assert!(DiscoveryOptions::new(0.2).check().is_ok());
    }
}
