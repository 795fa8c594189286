// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built teacher/student transformers with planted circuits.
//!
//! No training: every weight is set explicitly so the behaviour of each
//! component is known analytically. The residual stream is laid out in
//! named blocks (see [`layout`]); every layernorm has gain
//! `ANCHOR / 4` and the anchor block pins the residual norm, so each
//! layernorm acts as (nearly) the identity. Every row written into the
//! residual stream is made zero-sum via the balance dimension, so the
//! layernorm mean subtraction is exact.
//!
//! The numeral task frame is `[BOS] N done in a. N done in b. ... N done in`,
//! answered with the successor of the last numeral.
//!
//! * prev-token head: attends from position p to p−1 and copies the numeral
//!   code there into the prev-copy block.
//! * mover head: attends from the final position to the latest position
//!   whose prev-copy block is populated and moves it into the moved block.
//! * backup head: a second mover at half weight.
//! * successor MLP (after the mover): saturating ramp reading the moved
//!   block, writing the next numeral's code into the numeral block.
//! * successor MLP (before the mover): increments the prev-copy block in
//!   place; a readout MLP after the mover then copies the moved code.
//! * idle heads: uniform attention, writing a fixed pattern of position
//!   and numeral statistics into a side block; idle MLPs read and write
//!   that side block.

mod build;
mod vocab;

use serde::{Deserialize, Serialize};

pub use build::{build_model, build_planted_pair, standard_trio, write_fixtures, TOY_REFERENCE_PROMPTS};
pub use vocab::{numeral_id, toy_tokenizer, TOY_VOCAB};

use crate::error::{Error, Result};
use crate::intervention::{EdgeDst, EdgeId, EdgeSlot, EdgeSrc};
use crate::model::ComponentId;

/// Residual-stream blocks of the toy models (d_model = 64).
pub mod layout {
    pub const D_MODEL: usize = 64;
    /// Four anchor dims written by every position embedding as (+A, −A, +A, −A).
    pub const ANCHOR: usize = 0;
    pub const ANCHOR_VALUE: f32 = 32.0;
    /// Numeral one-hot code, numerals 0..16.
    pub const NUM: usize = 4;
    pub const N_NUMERALS: usize = 16;
    /// cos(a·p), sin(a·p), cos(b·p), sin(b·p).
    pub const POS: usize = 20;
    pub const PREV: usize = 24;
    pub const MOVED: usize = 40;
    /// Token identity code of non-numeral tokens.
    pub const FILL: usize = 56;
    pub const SCRATCH: usize = 60;
    pub const BALANCE: usize = 63;
    pub const MAX_POSITIONS: usize = 32;
    pub const VOCAB: usize = 64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PrevToken,
    Mover,
    Backup,
    Successor,
    /// Copies the moved code into the numeral block (pairs with a
    /// successor placed before the mover).
    Readout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedComponent {
    pub component: ComponentId,
    pub role: Role,
}

/// Where idle heads write their pattern, which sets how similar a
/// student's idle heads look to the teacher's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdleStyle {
    /// The teacher's pattern in the scratch block.
    Base,
    /// Half in scratch, the rest in the filler block (cosine ≈ 0.5).
    Rotated,
    /// Filler block only (cosine 0).
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub name: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub planted: Vec<PlantedComponent>,
    pub idle_style: IdleStyle,
}

impl PlantedSpec {
    /// 6 layers × 4 heads; prev-token L0.H1, mover L1.H2, backup L1.H3,
    /// successor L1.MLP.
    pub fn teacher() -> Self {
        Self {
            name: "toy_teacher".into(),
            n_layers: 6,
            n_heads: 4,
            d_head: 16,
            d_mlp: 64,
            planted: vec![
                PlantedComponent { component: ComponentId::head(0, 1), role: Role::PrevToken },
                PlantedComponent { component: ComponentId::head(1, 2), role: Role::Mover },
                PlantedComponent { component: ComponentId::head(1, 3), role: Role::Backup },
                PlantedComponent { component: ComponentId::mlp(1), role: Role::Successor },
            ],
            idle_style: IdleStyle::Base,
        }
    }

    /// 2 layers × 2 heads; prev-token L0.H0, in-place successor L0.MLP,
    /// mover L1.H0 with no backup, readout L1.MLP.
    pub fn student(style: IdleStyle) -> Self {
        let suffix = match style {
            IdleStyle::Base => "high",
            IdleStyle::Rotated => "medium",
            IdleStyle::Orthogonal => "low",
        };
        Self {
            name: format!("toy_student_{suffix}"),
            n_layers: 2,
            n_heads: 2,
            d_head: 32,
            d_mlp: 64,
            planted: vec![
                PlantedComponent { component: ComponentId::head(0, 0), role: Role::PrevToken },
                PlantedComponent { component: ComponentId::mlp(0), role: Role::Successor },
                PlantedComponent { component: ComponentId::head(1, 0), role: Role::Mover },
                PlantedComponent { component: ComponentId::mlp(1), role: Role::Readout },
            ],
            idle_style: style,
        }
    }

    pub fn role_of(&self, c: ComponentId) -> Option<Role> {
        self.planted.iter().find(|p| p.component == c).map(|p| p.role)
    }

    fn find(&self, role: Role) -> Vec<ComponentId> {
        self.planted.iter().filter(|p| p.role == role).map(|p| p.component).collect()
    }

    /// Components that carry the task with no redundancy (all planted
    /// components except backups).
    pub fn circuit_nodes(&self) -> Vec<ComponentId> {
        let mut v: Vec<ComponentId> = self
            .planted
            .iter()
            .filter(|p| p.role != Role::Backup)
            .map(|p| p.component)
            .collect();
        v.sort();
        v
    }

    /// Edges the planted mechanism routes the answer through. Queries and
    /// keys are excluded: mean ablation leaves positional attention intact.
    pub fn circuit_edges(&self) -> Vec<EdgeId> {
        let one = |r| self.find(r).first().copied();
        let (Some(prev), Some(mover), Some(succ)) = (one(Role::PrevToken), one(Role::Mover), one(Role::Successor)) else {
            return Vec::new();
        };
        let c = EdgeSrc::Component;
        let d = EdgeDst::Component;
        let mut edges = vec![EdgeId::new(EdgeSrc::Input, d(prev), EdgeSlot::Value)];
        match one(Role::Readout) {
            Some(readout) if succ.layer < mover.layer => edges.extend([
                EdgeId::new(c(prev), d(succ), EdgeSlot::MlpIn),
                EdgeId::new(c(succ), d(mover), EdgeSlot::Value),
                EdgeId::new(c(mover), d(readout), EdgeSlot::MlpIn),
                EdgeId::new(c(readout), EdgeDst::Output, EdgeSlot::DirectOut),
            ]),
            _ => edges.extend([
                EdgeId::new(c(prev), d(mover), EdgeSlot::Value),
                EdgeId::new(c(mover), d(succ), EdgeSlot::MlpIn),
                EdgeId::new(c(succ), EdgeDst::Output, EdgeSlot::DirectOut),
            ]),
        }
        edges.sort();
        edges
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Construction(format!("{}: {m}", self.name)));
        if self.n_layers == 0 || self.n_heads == 0 {
            return err("need at least one layer and one head".into());
        }
        if self.n_heads * self.d_head != layout::D_MODEL {
            return err(format!("n_heads x d_head must equal {}", layout::D_MODEL));
        }
        if self.d_head < layout::N_NUMERALS {
            return err(format!("d_head must be >= {}", layout::N_NUMERALS));
        }
        if self.d_mlp < 2 * layout::N_NUMERALS {
            return err(format!("d_mlp must be >= {}", 2 * layout::N_NUMERALS));
        }
        let cfg_layers = self.n_layers;
        for p in &self.planted {
            let c = p.component;
            if c.layer >= cfg_layers || c.head.is_some_and(|h| h >= self.n_heads) {
                return err(format!("{c} out of range"));
            }
            let wants_head = matches!(p.role, Role::PrevToken | Role::Mover | Role::Backup);
            if wants_head != c.is_head() {
                return err(format!("role {:?} cannot be realised by {c}", p.role));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if !self.planted.iter().all(|p| seen.insert(p.component)) {
            return err("component planted twice".into());
        }
        let prev = self.find(Role::PrevToken);
        let movers = self.find(Role::Mover);
        let succ = self.find(Role::Successor);
        if prev.len() != 1 || movers.len() != 1 || succ.len() != 1 {
            return err("need exactly one prev-token head, one mover and one successor".into());
        }
        let (prev, mover, succ) = (prev[0], movers[0], succ[0]);
        if prev.layer >= mover.layer {
            return err("prev-token head must sit in an earlier layer than the mover".into());
        }
        for b in self.find(Role::Backup) {
            if b.layer <= prev.layer {
                return err("backup must follow the prev-token head".into());
            }
        }
        let readouts = self.find(Role::Readout);
        if succ.layer >= mover.layer {
            if !readouts.is_empty() {
                return err("readout only pairs with a successor placed before the mover".into());
            }
        } else {
            if succ.layer < prev.layer {
                return err("successor before the mover must follow the prev-token head".into());
            }
            if readouts.len() != 1 || readouts[0].layer < mover.layer {
                return err("successor before the mover needs one readout MLP at or after the mover".into());
            }
        }
        Ok(())
    }
}
