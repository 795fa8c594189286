// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task datasets: numeral and word sequences, indirect-object identification,
//! external JSONL ingestion, and corrupted counterparts.
//!
//! Prompts are stored as text without the sequence-start token; encoding
//! always prepends it. Answer strings carry a leading space.

mod generate;
mod jsonl;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use generate::{
    corrupt_dataset, corrupt_example, gen_ioi, gen_numeral_sequences, gen_word_sequences, generate, IOI_NAMES,
    NOUNS, NUMBER_WORDS,
};
pub use jsonl::{load_external_jsonl, load_jsonl, save_jsonl};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    NumeralSeq,
    WordSeq,
    Ioi,
    External,
}

impl TaskTag {
    pub fn name(self) -> &'static str {
        match self {
            TaskTag::NumeralSeq => "numeral_seq",
            TaskTag::WordSeq => "word_seq",
            TaskTag::Ioi => "ioi",
            TaskTag::External => "external",
        }
    }
}

impl std::str::FromStr for TaskTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "numeral_seq" | "numeral" => Ok(TaskTag::NumeralSeq),
            "word_seq" | "word" => Ok(TaskTag::WordSeq),
            "ioi" => Ok(TaskTag::Ioi),
            "external" => Ok(TaskTag::External),
            _ => Err(Error::InvalidArgument(format!(
                "unknown task `{s}` (numeral_seq, word_seq, ioi, external)"
            ))),
        }
    }
}

/// One prompt with its (correct, distractor) answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub prompt: String,
    pub prompt_tokens: Vec<u32>,
    pub correct: String,
    pub incorrect: String,
    pub correct_token: u32,
    pub incorrect_token: u32,
    /// Start value, template id, entity names, and `target_positions`: the
    /// token indices a corruption may resample.
    pub metadata: BTreeMap<String, Value>,
}

impl TaskExample {
    pub fn target_positions(&self) -> Vec<usize> {
        self.metadata
            .get("target_positions")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_u64().map(|x| x as usize)).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.prompt_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: TaskTag,
    pub examples: Vec<TaskExample>,
    pub seed: u64,
    pub content_hash: String,
}

impl TaskDataset {
    /// Build a dataset and compute its hash over every token id (plus any
    /// extra bytes, e.g. a source file).
    pub fn new(task: TaskTag, examples: Vec<TaskExample>, seed: u64, extra: &[u8]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("dataset must contain at least one example".into()));
        }
        if let Some((i, _)) = examples
            .iter()
            .enumerate()
            .find(|(_, e)| e.correct_token == e.incorrect_token)
        {
            return Err(Error::InvalidArgument(format!(
                "example {i}: correct and incorrect tokens coincide"
            )));
        }
        let content_hash = content_hash(task, &examples, extra);
        Ok(Self {
            task,
            examples,
            seed,
            content_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example indices grouped by prompt length, ascending by length.
    pub fn length_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            g.entry(e.len()).or_default().push(i);
        }
        g
    }

    /// First `n` examples (all if fewer), rehashed.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.task, self.examples.iter().take(n).cloned().collect(), self.seed, &[])
    }

    pub fn check_vocab(&self, vocab_size: usize, max_positions: usize) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            if e.len() > max_positions {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: prompt length {} exceeds max_positions {max_positions}",
                    e.len()
                )));
            }
            let bad = e
                .prompt_tokens
                .iter()
                .chain([&e.correct_token, &e.incorrect_token])
                .find(|&&t| t as usize >= vocab_size);
            if let Some(t) = bad {
                return Err(Error::InvalidArgument(format!(
                    "example {i}: token {t} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

fn content_hash(task: TaskTag, examples: &[TaskExample], extra: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(task.name().as_bytes());
    for e in examples {
        h.update((e.prompt_tokens.len() as u64).to_le_bytes());
        for t in e.prompt_tokens.iter().chain([&e.correct_token, &e.incorrect_token]) {
            h.update(t.to_le_bytes());
        }
    }
    h.update(extra);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
