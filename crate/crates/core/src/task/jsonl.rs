// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON datasets: `{prompt, correct, incorrect, metadata}`,
//! one object per line with sorted keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use super::{TaskDataset, TaskExample, TaskTag};
use crate::error::{Error, Result};
use crate::model::Tokenizer;

fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let b: BTreeMap<&String, Value> = m.iter().map(|(k, v)| (k, sorted(v))).collect();
            Value::Object(b.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

/// Serialize a dataset; the task tag travels in each example's metadata.
pub fn to_jsonl(ds: &TaskDataset) -> Result<String> {
    let mut out = String::new();
    for e in &ds.examples {
        let mut meta = e.metadata.clone();
        meta.insert("task".into(), json!(ds.task.name()));
        let line = json!({
            "correct": e.correct,
            "incorrect": e.incorrect,
            "metadata": meta,
            "prompt": e.prompt,
        });
        out.push_str(&serde_json::to_string(&sorted(&line))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_jsonl(ds: &TaskDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_jsonl(ds)?)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Load any JSONL dataset. Lines carrying a `metadata.task` tag restore that
/// task (and its corruption positions); otherwise the dataset is external.
/// Answers that tokenize to several tokens are reduced to their first token
/// and flagged `first_token_reduced`.
pub fn load_jsonl(path: &Path, tok: &Tokenizer) -> Result<TaskDataset> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| parse_err(path, 0, e.to_string()))?;
    let bos = tok.bos_id()?;
    let mut examples = Vec::new();
    let mut tags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| parse_err(path, n, e.to_string()))?;
        let field = |k: &str| {
            v.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| parse_err(path, n, format!("missing string field `{k}`")))
        };
        let prompt = field("prompt")?;
        let correct = field("correct")?;
        let incorrect = field("incorrect")?;
        let mut metadata: BTreeMap<String, Value> = match v.get("metadata") {
            Some(Value::Object(m)) => m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            Some(_) => return Err(parse_err(path, n, "`metadata` must be an object")),
            None => BTreeMap::new(),
        };
        tags.push(metadata.remove("task").and_then(|t| t.as_str().and_then(|s| s.parse::<TaskTag>().ok())));
        let mut prompt_tokens = vec![bos];
        prompt_tokens.extend(tok.encode(&prompt).map_err(|e| parse_err(path, n, e.to_string()))?);
        let mut answer = |s: &str, key: &str| -> Result<u32> {
            let ids = tok.encode(s).map_err(|e| parse_err(path, n, e.to_string()))?;
            let first = *ids.first().ok_or_else(|| parse_err(path, n, format!("empty `{key}` answer")))?;
            if ids.len() > 1 {
                metadata.insert("first_token_reduced".into(), json!(true));
            }
            Ok(first)
        };
        let correct_token = answer(&correct, "correct")?;
        let incorrect_token = answer(&incorrect, "incorrect")?;
        if correct_token == incorrect_token {
            return Err(parse_err(path, n, "correct and incorrect answers share a first token"));
        }
        examples.push(TaskExample {
            prompt,
            prompt_tokens,
            correct,
            incorrect,
            correct_token,
            incorrect_token,
            metadata,
        });
    }
    let task = match tags.first() {
        Some(Some(t)) if tags.iter().all(|x| x == &Some(*t)) => *t,
        _ => TaskTag::External,
    };
    let extra = if task == TaskTag::External { bytes } else { Vec::new() };
    TaskDataset::new(task, examples, 0, &extra)
}

/// Load a `{prompt, correct, incorrect}` file as an external dataset.
pub fn load_external_jsonl(path: &Path, tok: &Tokenizer) -> Result<TaskDataset> {
    let mut ds = load_jsonl(path, tok)?;
    if ds.task != TaskTag::External {
        let bytes = std::fs::read(path)?;
        ds = TaskDataset::new(TaskTag::External, ds.examples, 0, &bytes)?;
    }
    Ok(ds)
}
