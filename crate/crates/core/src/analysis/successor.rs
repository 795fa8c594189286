// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{top_k, ComponentId, HookSet, Interventions, ModelBundle};
use crate::task::TaskDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessorCopyScores {
    pub head: ComponentId,
    /// % of examples whose answer token is in the head's direct top-5.
    pub successor_pct: f64,
    /// % of examples whose last given target token is in the top-5.
    pub copy_pct: f64,
    pub n: usize,
}

/// Unembed the head's output at the final position (no layernorm) and
/// check top-5 membership of the answer and of the last given token.
pub fn successor_copy_scores(
    model: &ModelBundle,
    ds: &TaskDataset,
    head: ComponentId,
    exec: Exec,
) -> Result<SuccessorCopyScores> {
    head.validate(&model.config)?;
    if !head.is_head() {
        return Err(Error::InvalidArgument(format!("{head} is not an attention head")));
    }
    let hook = head.output_hook();
    let hooks = HookSet::new().with(hook);
    let none = Interventions::none();
    let d = model.config.d_model;
    let unembed = model.weights.unembed();
    let hits = exec.try_map(&ds.examples, |e| {
        let last_given = *e
            .target_positions()
            .last()
            .ok_or_else(|| Error::InvalidArgument("example has no target positions".into()))?;
        let copied = e.prompt_tokens[last_given];
        let out = model.forward(&e.prompt_tokens, &hooks, &none)?;
        let row = out.cache.get(&hook)?.row(e.len() - 1);
        let logits: Vec<f32> = (0..model.config.vocab_size)
            .map(|t| {
                unembed[t * d..(t + 1) * d]
                    .iter()
                    .zip(row)
                    .map(|(u, x)| *u as f64 * *x as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let top: Vec<u32> = top_k(&logits, 5).into_iter().map(|(t, _)| t).collect();
        Ok::<_, Error>((top.contains(&e.correct_token), top.contains(&copied)))
    })?;
    let n = hits.len();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(SuccessorCopyScores {
        head,
        successor_pct: pct(hits.iter().filter(|h| h.0).count()),
        copy_pct: pct(hits.iter().filter(|h| h.1).count()),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::gen_numeral_sequences;
    use crate::toy::{build_model, PlantedSpec};

    #[test]
    fn zero_head_ranks_by_token_id() {
        let mut m = build_model(&PlantedSpec::teacher()).unwrap();
        let (d, dh) = (m.config.d_model, m.config.d_head);
        // Zero the output rows of L0.H2.
        for r in 2 * dh..3 * dh {
            m.weights.layers[0].out_weight[r * d..(r + 1) * d].iter_mut().for_each(|w| *w = 0.0);
        }
        let ds = gen_numeral_sequences(20, 0, &m.tokenizer).unwrap();
        let s = successor_copy_scores(&m, &ds, ComponentId::head(0, 2), Exec::Sequential).unwrap();
        // All-zero logits: top-5 is token ids 0..5, i.e. BOS and numerals 0..3.
        let expect = |tok: &dyn Fn(&crate::task::TaskExample) -> u32| {
            100.0 * ds.examples.iter().filter(|e| tok(e) < 5).count() as f64 / 20.0
        };
        assert_eq!(s.successor_pct, expect(&|e| e.correct_token));
        assert_eq!(s.copy_pct, expect(&|e| e.prompt_tokens[*e.target_positions().last().unwrap()]));
        assert!((0.0..=100.0).contains(&s.successor_pct));
    }

    #[test]
    fn mlp_is_rejected() {
        let m = build_model(&PlantedSpec::teacher()).unwrap();
        let ds = gen_numeral_sequences(4, 0, &m.tokenizer).unwrap();
        assert!(successor_copy_scores(&m, &ds, ComponentId::mlp(0), Exec::Sequential).is_err());
    }
}
