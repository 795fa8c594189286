// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer engine (GPT2 family).

mod config;
mod forward;
mod hooks;
mod lens;
pub mod reference;
pub mod safetensors;
mod tensor;
mod tokenizer;
mod weights;

use std::path::Path;

use sha2::{Digest, Sha256};

pub use config::{ArchitectureTag, ModelConfig};
pub use forward::{ActivationCache, ForwardOutput, Interventions, NoiseSpec, Replacement, SlotEdit, SlotTarget};
pub use hooks::{ComponentId, ComponentKind, HookPoint, HookSet, Site};
pub use lens::{logit_difference, logit_lens, qk_attention_matrix, top_k};
pub use tensor::Tensor;
pub use tokenizer::{pretokenize, Tokenizer, BOS};
pub use weights::{manifest, LayerWeights, ModelWeights};

#[allow(unused_imports)]
pub(crate) use forward::{gelu_new, layer_norm};

use crate::error::{Error, Result};

/// Config, weights and tokenizer of one model. Immutable once built.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub name: String,
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub tokenizer: Tokenizer,
    /// Hex sha256 of the serialized weights container.
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelBundle {
    /// Assemble a bundle from in-memory parts, validating shapes and values.
    pub fn from_parts(name: &str, config: ModelConfig, weights: ModelWeights, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let tensors = weights.to_tensors(&config);
        let bytes = safetensors::write(&tensors)?;
        // Re-read to apply exactly the load-time checks.
        let checked = ModelWeights::from_tensors(&config, safetensors::read(&bytes)?)?;
        Self::finish(name, config, checked, tokenizer, sha256_hex(&bytes))
    }

    fn finish(name: &str, config: ModelConfig, weights: ModelWeights, tokenizer: Tokenizer, digest: String) -> Result<Self> {
        if tokenizer.vocab_size() > config.vocab_size {
            return Err(Error::Load(format!(
                "tokenizer has {} entries but vocab_size is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        Ok(Self {
            name: name.to_string(),
            config,
            weights,
            tokenizer,
            digest,
        })
    }

    /// Load `config.json`, a weights container and a tokenizer directory.
    pub fn load(config_file: &Path, weights_file: &Path, tokenizer_dir: &Path) -> Result<Self> {
        let config = ModelConfig::from_json_file(config_file)?;
        let bytes = std::fs::read(weights_file)
            .map_err(|e| Error::Load(format!("{}: {e}", weights_file.display())))?;
        let weights = ModelWeights::from_tensors(&config, safetensors::read(&bytes)?)?;
        let tokenizer = Tokenizer::from_dir(tokenizer_dir)?;
        let name = config_file
            .parent()
            .and_then(|p| p.file_name())
            .map_or("model".to_string(), |n| n.to_string_lossy().into_owned());
        Self::finish(&name, config, weights, tokenizer, sha256_hex(&bytes))
    }

    /// Load a directory holding `config.json`, `model.safetensors`,
    /// `vocab.json` and `merges.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join("config.json"), &dir.join("model.safetensors"), dir)
    }

    /// Write the bundle in the same layout [`ModelBundle::load_dir`] reads.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.config)?)?;
        let bytes = safetensors::write(&self.weights.to_tensors(&self.config))?;
        std::fs::write(dir.join("model.safetensors"), bytes)?;
        self.tokenizer.write_dir(dir)
    }
}
