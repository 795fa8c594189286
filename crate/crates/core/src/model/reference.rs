// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exported-bundle validation: reference logits and checksum manifests.
//!
//! An exported bundle directory may carry `reference_logits.json`, holding
//! final-position logits computed by the upstream framework for a few fixed
//! prompts, and `checksums.sha256`, one `<hex>  <file>` line per file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ModelBundle};
use crate::error::{Error, Result};

pub const REFERENCE_FILE: &str = "reference_logits.json";
pub const CHECKSUM_FILE: &str = "checksums.sha256";

/// Max-abs tolerance between engine and reference logits.
pub const REFERENCE_TOLERANCE: f32 = 1e-3;

/// Fixed prompts the exporter dumps reference logits for.
pub const REFERENCE_PROMPTS: [&str; 5] = [
    "The quick brown fox jumps over the lazy dog.",
    "When Mary and John went to the store, John gave a drink to",
    "The capital of France is",
    "One, two, three, four,",
    "In 2010 the award was given to",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePrompt {
    pub text: String,
    /// Token ids fed to the model, exactly as the upstream tokenizer
    /// produced them.
    pub token_ids: Vec<u32>,
    /// Final-position logits.
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLogits {
    pub model: String,
    pub prompts: Vec<ReferencePrompt>,
}

impl ReferenceLogits {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reference file produced by this engine, for bundles without an
    /// upstream framework (the toy models).
    pub fn from_engine(model: &ModelBundle, prompts: &[&str]) -> Result<Self> {
        let prompts = prompts
            .iter()
            .map(|text| {
                let token_ids = model.tokenizer.encode(text)?;
                let logits = model.logits(&token_ids)?;
                Ok(ReferencePrompt { text: text.to_string(), token_ids, logits })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model: model.name.clone(), prompts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCheck {
    pub text: String,
    pub max_abs_diff: f32,
    /// Our tokenizer reproduces the reference token ids.
    pub tokenization_agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub prompts: Vec<PromptCheck>,
    pub tolerance: f32,
}

impl ReferenceCheck {
    pub fn max_abs_diff(&self) -> f32 {
        self.prompts.iter().map(|p| p.max_abs_diff).fold(0.0, f32::max)
    }

    pub fn passed(&self) -> bool {
        !self.prompts.is_empty()
            && self.prompts.iter().all(|p| p.tokenization_agrees && p.max_abs_diff <= self.tolerance)
    }
}

/// Run the engine on every reference prompt and compare logits.
pub fn check_reference_logits(model: &ModelBundle, reference: &ReferenceLogits, tolerance: f32) -> Result<ReferenceCheck> {
    let prompts = reference
        .prompts
        .iter()
        .map(|p| {
            if p.logits.len() != model.config.vocab_size {
                return Err(Error::DimensionMismatch(format!(
                    "reference for `{}` has {} logits, model vocab is {}",
                    p.text,
                    p.logits.len(),
                    model.config.vocab_size
                )));
            }
            let logits = model.logits(&p.token_ids)?;
            let max_abs_diff = logits.iter().zip(&p.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            let tokenization_agrees = model.tokenizer.encode(&p.text).is_ok_and(|ids| ids == p.token_ids);
            Ok(PromptCheck { text: p.text.clone(), max_abs_diff, tokenization_agrees })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceCheck { prompts, tolerance })
}

/// Write `checksums.sha256` covering `files` (names relative to `dir`).
pub fn write_checksums(dir: &Path, files: &[&str]) -> Result<()> {
    let mut text = String::new();
    for f in files {
        let bytes = std::fs::read(dir.join(f))?;
        text.push_str(&format!("{}  {f}\n", sha256_hex(&bytes)));
    }
    std::fs::write(dir.join(CHECKSUM_FILE), text)?;
    Ok(())
}

/// Verify every entry of `checksums.sha256`; returns the verified names.
pub fn verify_checksums(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(CHECKSUM_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse = |reason: &str| Error::Parse { path: path.display().to_string(), line: i + 1, reason: reason.into() };
        let (hex, name) = line.split_once("  ").ok_or_else(|| parse("expected `<sha256>  <file>`"))?;
        if hex.len() != 64 || name.contains('/') || name.contains('\\') {
            return Err(parse("malformed entry"));
        }
        let bytes = std::fs::read(dir.join(name)).map_err(|e| Error::Load(format!("{name}: {e}")))?;
        if sha256_hex(&bytes) != hex {
            return Err(Error::Load(format!("checksum mismatch for {name}")));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(Error::Load(format!("{} lists no files", path.display())));
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"abc").unwrap();
        write_checksums(dir.path(), &["a.bin"]).unwrap();
        let line = std::fs::read_to_string(dir.path().join(CHECKSUM_FILE)).unwrap();
        assert_eq!(line, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad  a.bin\n");
        assert_eq!(verify_checksums(dir.path()).unwrap(), vec!["a.bin"]);
        std::fs::write(dir.path().join("a.bin"), b"abd").unwrap();
        assert!(matches!(verify_checksums(dir.path()), Err(Error::Load(_))));
        std::fs::write(dir.path().join(CHECKSUM_FILE), "zz a.bin\n").unwrap();
        assert!(matches!(verify_checksums(dir.path()), Err(Error::Parse { .. })));
    }
}
