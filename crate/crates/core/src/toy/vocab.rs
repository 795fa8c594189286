// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use crate::model::Tokenizer;

/// The 64 byte-level token strings of the toy vocabulary, by id.
/// Ids 1..=16 are the numerals " 0" .. " 15".
pub const TOY_VOCAB: [&str; 64] = [
    "<|endoftext|>",
    "Ġ0", "Ġ1", "Ġ2", "Ġ3", "Ġ4", "Ġ5", "Ġ6", "Ġ7", "Ġ8", "Ġ9", "Ġ10", "Ġ11", "Ġ12", "Ġ13", "Ġ14", "Ġ15",
    "Ġzero", "Ġone", "Ġtwo", "Ġthree", "Ġfour", "Ġfive", "Ġsix", "Ġseven", "Ġeight", "Ġnine", "Ġten",
    "Ġeleven", "Ġtwelve", "Ġthirteen", "Ġfourteen", "Ġfifteen",
    "Ġdone", "Ġin", ".", ",",
    "ĠVan", "ĠHat", "ĠCup", "ĠPen", "ĠBox", "ĠKey", "ĠMap", "ĠBag",
    "ĠMary", "ĠJohn", "ĠAnna", "ĠTom", "ĠKate", "ĠPaul", "ĠLisa", "ĠMark",
    "When", "Ġand", "Ġwent", "Ġto", "Ġthe", "Ġstore", "Ġgave", "Ġa", "Ġbottle", "Ġof", "Ġmilk",
];

/// Token id of numeral `n` in the toy vocabulary.
pub fn numeral_id(n: usize) -> u32 {
    1 + n as u32
}

/// Tokenizer over [`TOY_VOCAB`]; every token is a whole pre-token, so no
/// merges are needed.
pub fn toy_tokenizer() -> Tokenizer {
    let vocab: HashMap<String, u32> = TOY_VOCAB
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_string(), i as u32))
        .collect();
    Tokenizer::new(vocab, Vec::new()).expect("static vocabulary is valid")
}
