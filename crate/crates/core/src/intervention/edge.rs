// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edges between components and two-pass path patching.
//!
//! Pass one records the clean outputs of every possible edge source. Pass
//! two reruns the prompt with the destination slot reading
//! `residual − clean_src + mean_src`; every other reader of the source
//! still sees its clean output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{evaluate, CorruptedMeans, RunConfig, ScoreSummary};
use crate::error::{Error, Result};
use crate::model::{
    ActivationCache, ComponentId, HookPoint, HookSet, Interventions, ModelBundle, ModelConfig, Site, SlotEdit,
    SlotTarget,
};
use crate::task::TaskDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeSrc {
    /// Token plus position embedding.
    Input,
    Component(ComponentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeDst {
    Component(ComponentId),
    /// Final layernorm and unembedding.
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSlot {
    Query,
    Key,
    Value,
    MlpIn,
    DirectOut,
}

impl EdgeSlot {
    pub fn name(self) -> &'static str {
        match self {
            EdgeSlot::Query => "query",
            EdgeSlot::Key => "key",
            EdgeSlot::Value => "value",
            EdgeSlot::MlpIn => "mlp_in",
            EdgeSlot::DirectOut => "direct_out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeId {
    pub src: EdgeSrc,
    pub dst: EdgeDst,
    pub slot: EdgeSlot,
}

impl EdgeId {
    pub fn new(src: EdgeSrc, dst: EdgeDst, slot: EdgeSlot) -> Self {
        Self { src, dst, slot }
    }

    /// Check slot/destination agreement and layer ordering.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("edge {self}: {m}")));
        if let EdgeSrc::Component(c) = self.src {
            c.validate(cfg)?;
        }
        match (self.dst, self.slot) {
            (EdgeDst::Component(d), EdgeSlot::Query | EdgeSlot::Key | EdgeSlot::Value) if d.is_head() => d.validate(cfg)?,
            (EdgeDst::Component(d), EdgeSlot::MlpIn) if !d.is_head() => d.validate(cfg)?,
            (EdgeDst::Output, EdgeSlot::DirectOut) => {}
            _ => return bad("slot does not belong to the destination"),
        }
        if let (EdgeSrc::Component(s), EdgeDst::Component(d)) = (self.src, self.dst) {
            let upstream = d.layer > s.layer || (d.layer == s.layer && s.is_head() && !d.is_head());
            if !upstream {
                return bad("source must be strictly upstream of the destination");
            }
        }
        Ok(())
    }

    /// Hook holding what the source writes into the residual stream.
    pub fn source_hook(&self) -> HookPoint {
        match self.src {
            EdgeSrc::Input => HookPoint::new(0, Site::ResidPre),
            EdgeSrc::Component(c) => c.output_hook(),
        }
    }

    pub fn slot_target(&self) -> SlotTarget {
        match (self.dst, self.slot) {
            (EdgeDst::Component(d), EdgeSlot::Query) => SlotTarget::Query { layer: d.layer, head: d.head.unwrap_or(0) },
            (EdgeDst::Component(d), EdgeSlot::Key) => SlotTarget::Key { layer: d.layer, head: d.head.unwrap_or(0) },
            (EdgeDst::Component(d), EdgeSlot::Value) => SlotTarget::Value { layer: d.layer, head: d.head.unwrap_or(0) },
            (EdgeDst::Component(d), _) => SlotTarget::MlpIn { layer: d.layer },
            (EdgeDst::Output, _) => SlotTarget::DirectOut,
        }
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.src {
            EdgeSrc::Input => f.write_str("input")?,
            EdgeSrc::Component(c) => write!(f, "{c}")?,
        }
        f.write_str("->")?;
        match self.dst {
            EdgeDst::Component(c) => write!(f, "{c}")?,
            EdgeDst::Output => f.write_str("output")?,
        }
        write!(f, "[{}]", self.slot.name())
    }
}

impl FromStr for EdgeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad edge `{s}` (expected SRC->DST[slot])"));
        let (src, rest) = s.split_once("->").ok_or_else(bad)?;
        let (dst, slot) = rest.strip_suffix(']').and_then(|r| r.split_once('[')).ok_or_else(bad)?;
        let src = match src {
            "input" => EdgeSrc::Input,
            c => EdgeSrc::Component(c.parse()?),
        };
        let dst = match dst {
            "output" => EdgeDst::Output,
            c => EdgeDst::Component(c.parse()?),
        };
        let slot = [EdgeSlot::Query, EdgeSlot::Key, EdgeSlot::Value, EdgeSlot::MlpIn, EdgeSlot::DirectOut]
            .into_iter()
            .find(|x| x.name() == slot)
            .ok_or_else(bad)?;
        Ok(EdgeId { src, dst, slot })
    }
}

impl Serialize for EdgeId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EdgeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Hooks any edge may read from: every component output plus the embedding.
pub fn edge_source_hooks(cfg: &ModelConfig) -> HookSet {
    let mut set = HookSet::component_outputs(cfg);
    set.insert(HookPoint::new(0, Site::ResidPre));
    set
}

/// Pass one: clean caches of every edge source, per example.
pub fn clean_caches(model: &ModelBundle, ds: &TaskDataset, run: &RunConfig) -> Result<Vec<ActivationCache>> {
    let hooks = edge_source_hooks(&model.config);
    let none = Interventions::none();
    run.exec
        .try_map(&ds.examples, |e| model.forward(&e.prompt_tokens, &hooks, &none).map(|o| o.cache))
}

/// Slot edits ablating `edges` for one example.
pub fn edge_interventions(
    edges: &[EdgeId],
    clean: &ActivationCache,
    means: &CorruptedMeans,
) -> Result<Interventions> {
    let len = clean.prompt_len();
    let mut iv = Interventions::none();
    for e in edges {
        let hook = e.source_hook();
        let delta = means.get(len, &hook)?.sub(clean.get(&hook)?);
        iv.slot_edits.push(SlotEdit {
            target: e.slot_target(),
            delta,
        });
    }
    Ok(iv)
}

/// Ablate several edges at once. `caches` are the pass-one caches from
/// [`clean_caches`]; they are computed here when absent.
pub fn path_patch_edges(
    model: &ModelBundle,
    ds: &TaskDataset,
    edges: &[EdgeId],
    means: &CorruptedMeans,
    caches: Option<&[ActivationCache]>,
    run: &RunConfig,
) -> Result<ScoreSummary> {
    for e in edges {
        e.validate(&model.config)?;
    }
    let owned;
    let caches = match caches {
        Some(c) => c,
        None => {
            owned = clean_caches(model, ds, run)?;
            &owned
        }
    };
    if caches.len() != ds.len() {
        return Err(Error::InvalidArgument("clean caches do not match the dataset".into()));
    }
    evaluate(model, ds, run, |i, _| edge_interventions(edges, &caches[i], means))
}

pub fn path_patch_edge(
    model: &ModelBundle,
    ds: &TaskDataset,
    edge: EdgeId,
    means: &CorruptedMeans,
    caches: Option<&[ActivationCache]>,
    run: &RunConfig,
) -> Result<ScoreSummary> {
    path_patch_edges(model, ds, &[edge], means, caches, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureTag;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 4,
            d_model: 16,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_positions: 8,
            layernorm_epsilon: 1e-5,
            architecture_tag: ArchitectureTag::Gpt2Family,
        }
    }

    #[test]
    fn edge_strings_round_trip() {
        for s in ["input->L0.H1[value]", "L0.H1->L1.H2[key]", "L1.H2->L1.MLP[mlp_in]", "L1.MLP->output[direct_out]"] {
            let e: EdgeId = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
            assert!(e.validate(&cfg()).is_ok(), "{s}");
        }
    }

    #[test]
    fn topology_is_enforced() {
        for s in ["L1.H0->L1.H1[query]", "L1.MLP->L1.H0[value]", "L1.MLP->L1.MLP[mlp_in]", "L0.H0->L1.H0[mlp_in]", "L0.H0->output[value]"] {
            let e: EdgeId = s.parse().unwrap();
            assert!(e.validate(&cfg()).is_err(), "{s}");
        }
    }
}
