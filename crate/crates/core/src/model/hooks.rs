// SPDX-License-Identifier: MIT OR Apache-2.0

//! Component handles and hook-point names.
//!
//! Hook points use the `L{layer}.{site}[.H{head}]` grammar everywhere: cache
//! keys, CLI flags and reports. Components print as `L{layer}.H{head}` or
//! `L{layer}.MLP`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    AttentionHead,
    Mlp,
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentKind::AttentionHead => "attention_head",
            ComponentKind::Mlp => "mlp",
        })
    }
}

/// One attention head or one MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComponentId {
    pub kind: ComponentKind,
    pub layer: usize,
    pub head: Option<usize>,
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        Self {
            kind: ComponentKind::AttentionHead,
            layer,
            head: Some(head),
        }
    }

    pub fn mlp(layer: usize) -> Self {
        Self {
            kind: ComponentKind::Mlp,
            layer,
            head: None,
        }
    }

    pub fn is_head(&self) -> bool {
        self.kind == ComponentKind::AttentionHead
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(Error::InvalidArgument(format!(
                "{self}: layer out of range (n_layers = {})",
                cfg.n_layers
            )));
        }
        match (self.kind, self.head) {
            (ComponentKind::AttentionHead, Some(h)) if h < cfg.n_heads => Ok(()),
            (ComponentKind::AttentionHead, _) => Err(Error::InvalidArgument(format!(
                "{self}: head index missing or >= n_heads ({})",
                cfg.n_heads
            ))),
            (ComponentKind::Mlp, None) => Ok(()),
            (ComponentKind::Mlp, Some(_)) => {
                Err(Error::InvalidArgument(format!("{self}: MLP with head index")))
            }
        }
    }

    /// Hook carrying this component's write into the residual stream.
    pub fn output_hook(&self) -> HookPoint {
        match self.kind {
            ComponentKind::AttentionHead => HookPoint::head(self.layer, Site::HeadOut, self.head.unwrap_or(0)),
            ComponentKind::Mlp => HookPoint::new(self.layer, Site::MlpOut),
        }
    }

    /// Every component of a model in canonical order: per layer, MLP first,
    /// then heads ascending.
    pub fn all(cfg: &ModelConfig) -> Vec<ComponentId> {
        (0..cfg.n_layers).flat_map(|l| Self::in_layer(cfg, l)).collect()
    }

    pub fn in_layer(cfg: &ModelConfig, layer: usize) -> Vec<ComponentId> {
        std::iter::once(ComponentId::mlp(layer))
            .chain((0..cfg.n_heads).map(move |h| ComponentId::head(layer, h)))
            .collect()
    }

    /// Sort key: (layer, MLP-before-heads, head).
    pub fn order_key(&self) -> (usize, usize, usize) {
        match self.kind {
            ComponentKind::Mlp => (self.layer, 0, 0),
            ComponentKind::AttentionHead => (self.layer, 1, self.head.unwrap_or(0)),
        }
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "L{}.H{}", self.layer, h),
            None => write!(f, "L{}.MLP", self.layer),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad component id `{s}` (expected L<l>.H<h> or L<l>.MLP)"));
        let s = s.trim();
        let s = s.strip_prefix("T-").or_else(|| s.strip_prefix("S-")).unwrap_or(s);
        let (l, rest) = s.split_once(['.', '-']).ok_or_else(bad)?;
        let layer: usize = l.strip_prefix('L').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if rest.eq_ignore_ascii_case("mlp") {
            return Ok(ComponentId::mlp(layer));
        }
        let head: usize = rest.strip_prefix('H').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(ComponentId::head(layer, head))
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named activation sites within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    ResidPre,
    HeadQ,
    HeadK,
    HeadV,
    HeadPattern,
    HeadOut,
    ResidMid,
    MlpPre,
    MlpAct,
    MlpOut,
    ResidPost,
    /// Full-position logits; only valid on the last layer.
    Logits,
}

impl Site {
    pub const ALL: [Site; 12] = [
        Site::ResidPre,
        Site::HeadQ,
        Site::HeadK,
        Site::HeadV,
        Site::HeadPattern,
        Site::HeadOut,
        Site::ResidMid,
        Site::MlpPre,
        Site::MlpAct,
        Site::MlpOut,
        Site::ResidPost,
        Site::Logits,
    ];

    pub fn is_per_head(self) -> bool {
        matches!(
            self,
            Site::HeadQ | Site::HeadK | Site::HeadV | Site::HeadPattern | Site::HeadOut
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::ResidPre => "resid_pre",
            Site::HeadQ => "head_q",
            Site::HeadK => "head_k",
            Site::HeadV => "head_v",
            Site::HeadPattern => "head_pattern",
            Site::HeadOut => "head_out",
            Site::ResidMid => "resid_mid",
            Site::MlpPre => "mlp_pre",
            Site::MlpAct => "mlp_act",
            Site::MlpOut => "mlp_out",
            Site::ResidPost => "resid_post",
            Site::Logits => "logits",
        }
    }

    /// Row width of the tensor recorded at this site (`seq` for patterns).
    pub fn width(self, cfg: &ModelConfig, seq: usize) -> usize {
        match self {
            Site::ResidPre | Site::ResidMid | Site::ResidPost | Site::HeadOut | Site::MlpOut => cfg.d_model,
            Site::HeadQ | Site::HeadK | Site::HeadV => cfg.d_head,
            Site::HeadPattern => seq,
            Site::MlpPre | Site::MlpAct => cfg.d_mlp,
            Site::Logits => cfg.vocab_size,
        }
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown hook site `{s}`")))
    }
}

/// A named activation location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
    pub head: Option<usize>,
}

impl HookPoint {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site, head: None }
    }

    pub fn head(layer: usize, site: Site, head: usize) -> Self {
        Self {
            layer,
            site,
            head: Some(head),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(Error::InvalidArgument(format!("{self}: layer out of range")));
        }
        if self.site == Site::Logits && self.layer != cfg.n_layers - 1 {
            return Err(Error::InvalidArgument(format!("{self}: logits live on the last layer")));
        }
        match (self.site.is_per_head(), self.head) {
            (true, Some(h)) if h < cfg.n_heads => Ok(()),
            (true, _) => Err(Error::InvalidArgument(format!("{self}: needs a valid head index"))),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::InvalidArgument(format!("{self}: site takes no head index"))),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.site.name())?;
        if let Some(h) = self.head {
            write!(f, ".H{h}")?;
        }
        Ok(())
    }
}

impl FromStr for HookPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad hook point `{s}` (expected L<l>.<site>[.H<h>])"));
        let mut parts = s.split('.');
        let layer: usize = parts
            .next()
            .and_then(|p| p.strip_prefix('L'))
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        let site: Site = parts.next().ok_or_else(bad)?.parse()?;
        let head = match parts.next() {
            Some(h) => Some(h.strip_prefix('H').ok_or_else(bad)?.parse().map_err(|_| bad())?),
            None => None,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(HookPoint { layer, site, head })
    }
}

impl Serialize for HookPoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookPoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Set of hooks to record during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HookSet(BTreeSet<HookPoint>);

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, hook: HookPoint) -> &mut Self {
        self.0.insert(hook);
        self
    }

    pub fn with(mut self, hook: HookPoint) -> Self {
        self.0.insert(hook);
        self
    }

    pub fn contains(&self, hook: &HookPoint) -> bool {
        self.0.contains(hook)
    }

    pub fn iter(&self) -> impl Iterator<Item = &HookPoint> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every site of every layer except full logits.
    pub fn all(cfg: &ModelConfig) -> Self {
        let mut set = Self::new();
        for l in 0..cfg.n_layers {
            for site in Site::ALL {
                if site == Site::Logits {
                    continue;
                }
                if site.is_per_head() {
                    for h in 0..cfg.n_heads {
                        set.insert(HookPoint::head(l, site, h));
                    }
                } else {
                    set.insert(HookPoint::new(l, site));
                }
            }
        }
        set
    }

    /// Output hooks (head_out, mlp_out) of every component.
    pub fn component_outputs(cfg: &ModelConfig) -> Self {
        ComponentId::all(cfg).iter().map(ComponentId::output_hook).collect()
    }
}

impl FromIterator<HookPoint> for HookSet {
    fn from_iter<I: IntoIterator<Item = HookPoint>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl Extend<HookPoint> for HookSet {
    fn extend<I: IntoIterator<Item = HookPoint>>(&mut self, iter: I) {
        self.0.extend(iter);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hook_grammar_round_trips() {
        for s in ["L0.resid_pre", "L3.head_pattern.H7", "L11.mlp_out"] {
            let h: HookPoint = s.parse().unwrap();
            assert_eq!(h.to_string(), s);
        }
        assert!("L1.bogus".parse::<HookPoint>().is_err());
        assert!("1.mlp_out".parse::<HookPoint>().is_err());
        assert!("L1.mlp_out.H2.x".parse::<HookPoint>().is_err());
    }

    #[test]
    fn component_ids_parse_layer_head_names() {
        assert_eq!("T-L4-H4".parse::<ComponentId>().unwrap(), ComponentId::head(4, 4));
        assert_eq!("L9.MLP".parse::<ComponentId>().unwrap(), ComponentId::mlp(9));
        assert_eq!(ComponentId::head(7, 11).to_string(), "L7.H11");
    }

    #[test]
    fn canonical_order_puts_mlp_first() {
        let mut v = vec![ComponentId::head(1, 0), ComponentId::mlp(1), ComponentId::head(0, 3)];
        v.sort();
        assert_eq!(v, vec![ComponentId::head(0, 3), ComponentId::mlp(1), ComponentId::head(1, 0)]);
    }
}
