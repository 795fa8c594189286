// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level byte-pair tokenizer consuming `vocab.json` + `merges.txt`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// The sequence-start token prepended to every prompt.
pub const BOS: &str = "<|endoftext|>";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

fn byte_alphabet() -> [char; 256] {
    let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
    let mut out = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        out[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Other,
    Space,
}

fn class_of(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else {
        Class::Other
    }
}

/// Split text the way the GPT2 pre-tokenizer pattern does:
/// contractions, ` ?letters`, ` ?numbers`, ` ?other`, trailing-space runs.
pub fn pretokenize(text: &str) -> Vec<&str> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let rest = &text[chars[i].0..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(*c)) {
            let n = c.chars().count();
            out.push(&text[byte_at(i)..byte_at(i + n)]);
            i += n;
            continue;
        }
        let mut j = i;
        if chars[j].1 == ' ' && j + 1 < chars.len() && class_of(chars[j + 1].1) != Class::Space {
            j += 1;
        }
        let class = class_of(chars[j].1);
        if class != Class::Space {
            let mut k = j + 1;
            while k < chars.len() && class_of(chars[k].1) == class {
                k += 1;
            }
            out.push(&text[byte_at(i)..byte_at(k)]);
            i = k;
            continue;
        }
        let mut k = i;
        while k < chars.len() && class_of(chars[k].1) == Class::Space {
            k += 1;
        }
        let end = if k < chars.len() && k - i >= 2 { k - 1 } else { k };
        out.push(&text[byte_at(i)..byte_at(end)]);
        i = end;
    }
    out
}

impl Tokenizer {
    /// Build from a token→id table and ordered merge rules.
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Load("tokenizer vocabulary is empty".into()));
        }
        let size = vocab.values().max().map_or(0, |m| *m as usize + 1);
        let mut decoder = vec![String::new(); size];
        for (tok, &id) in &vocab {
            decoder[id as usize] = tok.clone();
        }
        let byte_to_char = byte_alphabet();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let merge_ranks = merges.iter().cloned().enumerate().map(|(r, m)| (m, r)).collect();
        Ok(Self {
            encoder: vocab,
            decoder,
            merge_ranks,
            merges,
            byte_to_char,
            char_to_byte,
        })
    }

    /// Load `vocab.json` and `merges.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab_text = std::fs::read_to_string(&vocab_path)
            .map_err(|e| Error::Load(format!("{}: {e}", vocab_path.display())))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)
            .map_err(|e| Error::Load(format!("{}: {e}", vocab_path.display())))?;
        let merges_text = std::fs::read_to_string(&merges_path)
            .map_err(|e| Error::Load(format!("{}: {e}", merges_path.display())))?;
        let mut merges = Vec::new();
        for (i, line) in merges_text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| Error::Parse {
                path: merges_path.display().to_string(),
                line: i + 1,
                reason: "merge rule must be two space-separated symbols".into(),
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::new(vocab, merges)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut vocab = serde_json::Map::new();
        for (id, tok) in self.decoder.iter().enumerate() {
            if self.encoder.get(tok) == Some(&(id as u32)) {
                vocab.insert(tok.clone(), serde_json::Value::from(id));
            }
        }
        std::fs::write(dir.join("vocab.json"), serde_json::to_vec_pretty(&vocab)?)?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(&format!("{a} {b}\n"));
        }
        std::fs::write(dir.join("merges.txt"), merges)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    /// Byte-level form of raw text (bytes mapped into printable characters).
    pub fn to_byte_level(&self, text: &str) -> String {
        text.bytes().map(|b| self.byte_to_char[b as usize]).collect()
    }

    /// Id of a byte-level token string, if present.
    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    /// Id of raw text that must encode to exactly one token.
    pub fn single_token(&self, text: &str) -> Option<u32> {
        match self.encode(text) {
            Ok(ids) if ids.len() == 1 => Some(ids[0]),
            _ => None,
        }
    }

    pub fn bos_id(&self) -> Result<u32> {
        self.token_id(BOS)
            .ok_or_else(|| Error::Load(format!("tokenizer has no {BOS} token")))
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && &parts[i] == a && &parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    /// Encode text. Special tokens of the form `<|...|>` present in the
    /// vocabulary are matched literally.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let special = rest
                .match_indices("<|")
                .find_map(|(i, _)| {
                    let end = rest[i..].find("|>")? + i + 2;
                    self.encoder.get(&rest[i..end]).map(|id| (i, end, *id))
                });
            let (chunk, tail) = match special {
                Some((start, end, id)) => {
                    self.encode_plain(&rest[..start], &mut ids)?;
                    ids.push(id);
                    (None, &rest[end..])
                }
                None => (Some(rest), ""),
            };
            if let Some(c) = chunk {
                self.encode_plain(c, &mut ids)?;
            }
            rest = tail;
        }
        Ok(ids)
    }

    fn encode_plain(&self, text: &str, ids: &mut Vec<u32>) -> Result<()> {
        for piece in pretokenize(text) {
            let word = self.to_byte_level(piece);
            if let Some(&id) = self.encoder.get(&word) {
                ids.push(id);
                continue;
            }
            for sym in self.bpe(&word) {
                let id = self.encoder.get(&sym).ok_or_else(|| {
                    Error::InvalidArgument(format!("symbol `{sym}` of `{piece}` not in vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        Ok(())
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.decoder.get(id as usize).map(String::as_str).unwrap_or("");
            if tok.starts_with("<|") && tok.ends_with("|>") {
                bytes.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(b) => bytes.push(*b),
                    None => bytes.extend_from_slice(c.to_string().as_bytes()),
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Byte-level token string for an id.
    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(id as usize).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretokenizer_matches_gpt2_pattern() {
        assert_eq!(pretokenize("Hello world"), vec!["Hello", " world"]);
        assert_eq!(pretokenize("Van done in 1."), vec!["Van", " done", " in", " 1", "."]);
        assert_eq!(pretokenize("it's  ok"), vec!["it", "'s", " ", " ok"]);
        assert_eq!(pretokenize("a\nb"), vec!["a", "\n", "b"]);
        assert_eq!(pretokenize("x   "), vec!["x", "   "]);
        assert_eq!(pretokenize("12ab!?"), vec!["12", "ab", "!?"]);
    }

    #[test]
    fn byte_alphabet_is_bijective() {
        let a = byte_alphabet();
        let set: std::collections::HashSet<char> = a.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(a[b' ' as usize], 'Ġ');
        assert_eq!(a[b'A' as usize], 'A');
    }

    fn tiny() -> Tokenizer {
        let toks = ["<|endoftext|>", "h", "e", "l", "o", "Ġ", "he", "ll", "hell", "hello", "Ġhello"];
        let vocab = toks.iter().enumerate().map(|(i, t)| (t.to_string(), i as u32)).collect();
        let merges = [("h", "e"), ("l", "l"), ("he", "ll"), ("hell", "o"), ("Ġ", "hello")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        Tokenizer::new(vocab, merges).unwrap()
    }

    #[test]
    fn merges_apply_by_rank() {
        let t = tiny();
        assert_eq!(t.encode("hello").unwrap(), vec![9]);
        assert_eq!(t.encode("<|endoftext|> hello").unwrap(), vec![0, 10]);
        assert_eq!(t.encode("hel").unwrap(), vec![6, 3]);
        assert_eq!(t.decode(&[0, 10]), "<|endoftext|> hello");
        assert!(t.encode("z").is_err());
    }

    #[test]
    fn dir_round_trip() {
        let t = tiny();
        let dir = tempfile::tempdir().unwrap();
        t.write_dir(dir.path()).unwrap();
        let back = Tokenizer::from_dir(dir.path()).unwrap();
        assert_eq!(back.encode("hello hello").unwrap(), t.encode("hello hello").unwrap());
    }
}
