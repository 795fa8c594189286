// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{TaskDataset, TaskExample, TaskTag};
use crate::error::{Error, Result};
use crate::model::Tokenizer;

/// Nouns for the sequence frame.
pub const NOUNS: [&str; 8] = ["Van", "Hat", "Cup", "Pen", "Box", "Key", "Map", "Bag"];

pub const NUMBER_WORDS: [&str; 16] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen",
];

/// Name pool for the indirect-object task; names that are not a single
/// token under the active tokenizer are skipped.
pub const IOI_NAMES: [&str; 16] = [
    "Mary", "John", "Anna", "Tom", "Kate", "Paul", "Lisa", "Mark", "James", "Sarah", "David", "Emma", "Michael",
    "Laura", "Peter", "Alice",
];

const SEQ_LEN: usize = 4;
const START_RANGE: std::ops::RangeInclusive<usize> = 1..=6;
const CORRUPT_RANGE: std::ops::RangeInclusive<usize> = 1..=10;

/// Prompt assembled piece by piece, each piece one token.
struct Builder<'a> {
    tok: &'a Tokenizer,
    text: String,
    tokens: Vec<u32>,
    missing: Vec<String>,
}

impl<'a> Builder<'a> {
    fn new(tok: &'a Tokenizer) -> Result<Self> {
        Ok(Self {
            tok,
            text: String::new(),
            tokens: vec![tok.bos_id()?],
            missing: Vec::new(),
        })
    }

    /// Append a piece and return its token position.
    fn push(&mut self, piece: &str) -> usize {
        self.text.push_str(piece);
        match self.tok.single_token(piece) {
            Some(id) => self.tokens.push(id),
            None => {
                if !self.missing.iter().any(|m| m == piece) {
                    self.missing.push(piece.to_string());
                }
                self.tokens.push(0);
            }
        }
        self.tokens.len() - 1
    }

    fn finish(self) -> Result<(String, Vec<u32>)> {
        if !self.missing.is_empty() {
            return Err(Error::Generation(format!(
                "template pieces not single tokens under this tokenizer: {:?}",
                self.missing
            )));
        }
        let mut full = vec![self.tok.bos_id()?];
        full.extend(self.tok.encode(&self.text)?);
        if full != self.tokens {
            return Err(Error::Generation(format!(
                "prompt `{}` tokenizes differently as a whole than piecewise",
                self.text
            )));
        }
        Ok((self.text, self.tokens))
    }
}

fn single(tok: &Tokenizer, text: &str) -> Result<u32> {
    tok.single_token(text)
        .ok_or_else(|| Error::Generation(format!("answer `{text}` is not a single token")))
}

fn sequence_example(tok: &Tokenizer, rng: &mut ChaCha8Rng, words: bool) -> Result<TaskExample> {
    let spell = |v: usize| if words { NUMBER_WORDS[v].to_string() } else { v.to_string() };
    let start = rng.random_range(START_RANGE);
    let nouns: Vec<&str> = (0..=SEQ_LEN).map(|_| *NOUNS.choose(rng).expect("non-empty")).collect();
    let mut b = Builder::new(tok)?;
    let mut targets = Vec::with_capacity(SEQ_LEN);
    for (i, noun) in nouns.iter().enumerate() {
        b.push(&format!(" {noun}"));
        b.push(" done");
        b.push(" in");
        if i < SEQ_LEN {
            targets.push(b.push(&format!(" {}", spell(start + i))));
            b.push(".");
        }
    }
    let (prompt, tokens) = b.finish()?;
    let correct = format!(" {}", spell(start + SEQ_LEN));
    let incorrect = format!(" {}", spell(start + SEQ_LEN - 1));
    let mut metadata = BTreeMap::new();
    metadata.insert("start".into(), json!(start));
    metadata.insert("nouns".into(), json!(nouns));
    metadata.insert("template_id".into(), json!(0));
    metadata.insert("target_positions".into(), json!(targets));
    Ok(TaskExample {
        prompt,
        prompt_tokens: tokens,
        correct_token: single(tok, &correct)?,
        incorrect_token: single(tok, &incorrect)?,
        correct,
        incorrect,
        metadata,
    })
}

/// Four increasing numerals in a noun frame; the answer is the fifth.
pub fn gen_numeral_sequences(n: usize, seed: u64, tok: &Tokenizer) -> Result<TaskDataset> {
    gen_sequences(n, seed, tok, false)
}

/// As [`gen_numeral_sequences`] with number words in place of digits.
pub fn gen_word_sequences(n: usize, seed: u64, tok: &Tokenizer) -> Result<TaskDataset> {
    gen_sequences(n, seed, tok, true)
}

fn gen_sequences(n: usize, seed: u64, tok: &Tokenizer, words: bool) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| sequence_example(tok, &mut rng, words))
        .collect::<Result<Vec<_>>>()?;
    let tag = if words { TaskTag::WordSeq } else { TaskTag::NumeralSeq };
    TaskDataset::new(tag, examples, seed, &[])
}

fn valid_names(tok: &Tokenizer) -> Vec<&'static str> {
    IOI_NAMES
        .iter()
        .copied()
        .filter(|name| {
            let ok = tok.single_token(&format!(" {name}")).is_some();
            if !ok {
                log::warn!("skipping IOI name `{name}`: not a single token");
            }
            ok
        })
        .collect()
}

fn ioi_example(tok: &Tokenizer, rng: &mut ChaCha8Rng, names: &[&str]) -> Result<TaskExample> {
    let picked: Vec<&str> = names.choose_multiple(rng, 2).copied().collect();
    let (io, s) = (picked[0], picked[1]);
    let template = rng.random_range(0..2usize);
    let mut b = Builder::new(tok)?;
    let (first, second) = if template == 0 { (io, s) } else { (s, io) };
    b.push("When");
    let p1 = b.push(&format!(" {first}"));
    b.push(" and");
    let p2 = b.push(&format!(" {second}"));
    for w in [" went", " to", " the", " store", ","] {
        b.push(w);
    }
    let p3 = b.push(&format!(" {s}"));
    for w in [" gave", " a", " bottle", " of", " milk", " to"] {
        b.push(w);
    }
    let (prompt, tokens) = b.finish()?;
    let io_pos = if template == 0 { p1 } else { p2 };
    let correct = format!(" {io}");
    let incorrect = format!(" {s}");
    let mut metadata = BTreeMap::new();
    metadata.insert("io_name".into(), json!(io));
    metadata.insert("s_name".into(), json!(s));
    metadata.insert("template_id".into(), json!(template));
    metadata.insert("io_positions".into(), json!([io_pos]));
    metadata.insert("target_positions".into(), json!([p1, p2, p3]));
    Ok(TaskExample {
        prompt,
        prompt_tokens: tokens,
        correct_token: single(tok, &correct)?,
        incorrect_token: single(tok, &incorrect)?,
        correct,
        incorrect,
        metadata,
    })
}

/// Two-name template; the answer is the indirect object, the distractor
/// the subject.
pub fn gen_ioi(n: usize, seed: u64, tok: &Tokenizer) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let names = valid_names(tok);
    if names.len() < 4 {
        return Err(Error::Generation(format!(
            "need at least 4 single-token names, found {}",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| ioi_example(tok, &mut rng, &names))
        .collect::<Result<Vec<_>>>()?;
    TaskDataset::new(TaskTag::Ioi, examples, seed, &[])
}

pub fn generate(task: TaskTag, n: usize, seed: u64, tok: &Tokenizer) -> Result<TaskDataset> {
    match task {
        TaskTag::NumeralSeq => gen_numeral_sequences(n, seed, tok),
        TaskTag::WordSeq => gen_word_sequences(n, seed, tok),
        TaskTag::Ioi => gen_ioi(n, seed, tok),
        TaskTag::External => Err(Error::InvalidArgument(
            "external datasets are loaded with --dataset-path, not generated".into(),
        )),
    }
}

/// Resample the sequence positions of `example` from the same token family.
/// Sequence tasks draw values uniformly from 1..=10; IOI replaces both names
/// with two other names from the pool. Answers are left as in the clean run.
pub fn corrupt_example(example: &TaskExample, task: TaskTag, tok: &Tokenizer, seed: u64) -> Result<TaskExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = example.clone();
    let targets = example.target_positions();
    if targets.iter().any(|&p| p >= example.len()) {
        return Err(Error::InvalidArgument("target position beyond prompt".into()));
    }
    match task {
        TaskTag::NumeralSeq | TaskTag::WordSeq => {
            for &p in &targets {
                let v = rng.random_range(CORRUPT_RANGE);
                let text = if task == TaskTag::WordSeq {
                    format!(" {}", NUMBER_WORDS[v])
                } else {
                    format!(" {v}")
                };
                out.prompt_tokens[p] = single(tok, &text)?;
            }
        }
        TaskTag::Ioi => {
            let io = example.metadata.get("io_name").and_then(Value::as_str).unwrap_or("");
            let s = example.metadata.get("s_name").and_then(Value::as_str).unwrap_or("");
            let pool: Vec<&str> = valid_names(tok).into_iter().filter(|n| *n != io && *n != s).collect();
            if pool.len() < 2 {
                return Err(Error::Generation("name pool too small to corrupt".into()));
            }
            let picked: Vec<&str> = pool.choose_multiple(&mut rng, 2).copied().collect();
            let io_pos: Vec<usize> = example
                .metadata
                .get("io_positions")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(|v| v.as_u64().map(|x| x as usize)).collect())
                .unwrap_or_default();
            for &p in &targets {
                let name = if io_pos.contains(&p) { picked[0] } else { picked[1] };
                out.prompt_tokens[p] = single(tok, &format!(" {name}"))?;
            }
        }
        TaskTag::External => {
            return Err(Error::InvalidArgument(
                "external examples have no designated sequence positions to corrupt".into(),
            ))
        }
    }
    out.prompt = tok.decode(&out.prompt_tokens[1..]);
    out.metadata.insert("corrupted".into(), json!(true));
    Ok(out)
}

/// Corrupt every example; example `i` uses its own stream of `seed`.
pub fn corrupt_dataset(ds: &TaskDataset, tok: &Tokenizer, seed: u64) -> Result<TaskDataset> {
    let examples = ds
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let s = seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            corrupt_example(e, ds.task, tok, s)
        })
        .collect::<Result<Vec<_>>>()?;
    TaskDataset::new(ds.task, examples, seed, &[])
}
