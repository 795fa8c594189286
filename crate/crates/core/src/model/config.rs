// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported architecture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureTag {
    #[default]
    Gpt2Family,
}

/// Decoder-only transformer hyperparameters, stored verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub layernorm_epsilon: f64,
    #[serde(default)]
    pub architecture_tag: ArchitectureTag,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Load(format!("config field {name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Load(format!(
                "d_model ({}) != n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.layernorm_epsilon > 0.0 && self.layernorm_epsilon.is_finite()) {
            return Err(Error::Load("layernorm_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of attention heads plus MLPs.
    pub fn n_components(&self) -> usize {
        self.n_layers * (self.n_heads + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 64,
            vocab_size: 64,
            max_positions: 32,
            layernorm_epsilon: 1e-5,
            architecture_tag: ArchitectureTag::Gpt2Family,
        }
    }

    #[test]
    fn head_product_must_match_width() {
        assert!(cfg().validate().is_ok());
        let bad = ModelConfig { d_head: 15, ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_uses_snake_case_tag() {
        let s = serde_json::to_string(&cfg()).unwrap();
        assert!(s.contains("\"architecture_tag\":\"gpt2_family\""));
    }
}
