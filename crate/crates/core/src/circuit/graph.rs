// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CircuitEvaluation, EdgeScore, NodeTest};
use crate::error::Result;
use crate::intervention::{EdgeDst, EdgeSrc};
use crate::model::ComponentId;

/// A discovered circuit with the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub model: String,
    pub model_digest: String,
    pub nodes: Vec<ComponentId>,
    pub edges: Vec<crate::intervention::EdgeId>,
    pub threshold: f64,
    pub base_mean_logit_diff: f64,
    pub dataset_hash: String,
    pub evaluation: Option<CircuitEvaluation>,
    #[serde(default)]
    pub node_trace: Vec<NodeTest>,
    #[serde(default)]
    pub edge_scores: Vec<EdgeScore>,
}

impl CircuitGraph {
    pub fn n_heads(&self) -> usize {
        self.nodes.iter().filter(|c| c.is_head()).count()
    }

    pub fn n_mlps(&self) -> usize {
        self.nodes.len() - self.n_heads()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Graphviz rendering; edge labels carry the destination slot.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph circuit {{");
        let _ = writeln!(s, "  rankdir=BT;");
        let _ = writeln!(s, "  label=\"{} T={}\";", self.model, self.threshold);
        let _ = writeln!(s, "  \"input\" [shape=box];");
        let _ = writeln!(s, "  \"output\" [shape=box];");
        for c in &self.nodes {
            let shape = if c.is_head() { "ellipse" } else { "diamond" };
            let _ = writeln!(s, "  \"{c}\" [shape={shape}];");
        }
        for e in &self.edges {
            let src = match e.src {
                EdgeSrc::Input => "input".to_string(),
                EdgeSrc::Component(c) => c.to_string(),
            };
            let dst = match e.dst {
                EdgeDst::Component(c) => c.to_string(),
                EdgeDst::Output => "output".to_string(),
            };
            let _ = writeln!(s, "  \"{src}\" -> \"{dst}\" [label=\"{}\"];", e.slot.name());
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> CircuitGraph {
        CircuitGraph {
            model: "m".into(),
            model_digest: "d".into(),
            nodes: vec![ComponentId::head(0, 1), ComponentId::mlp(1)],
            edges: vec!["L0.H1->L1.MLP[mlp_in]".parse().unwrap(), "L1.MLP->output[direct_out]".parse().unwrap()],
            threshold: 0.2,
            base_mean_logit_diff: 3.0,
            dataset_hash: "h".into(),
            evaluation: None,
            node_trace: vec![],
            edge_scores: vec![],
        }
    }

    #[test]
    fn json_round_trip() {
        let g = graph();
        let text = g.to_json().unwrap();
        assert!(text.contains("\"L0.H1->L1.MLP[mlp_in]\""));
        assert_eq!(CircuitGraph::from_json(&text).unwrap(), g);
        assert_eq!((g.n_heads(), g.n_mlps()), (1, 1));
    }

    #[test]
    fn dot_lists_every_edge() {
        let dot = graph().to_dot();
        assert!(dot.starts_with("digraph circuit {"));
        assert!(dot.contains("\"L0.H1\" -> \"L1.MLP\" [label=\"mlp_in\"]"));
        assert!(dot.contains("\"L1.MLP\" -> \"output\" [label=\"direct_out\"]"));
    }
}
