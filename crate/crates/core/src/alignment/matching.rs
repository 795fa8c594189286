// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{InfluenceTable, PairSimilarities};
use crate::error::{Error, Result};
use crate::model::{ComponentId, ComponentKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Per-teacher argmax; students may be matched many times.
    Greedy,
    /// Maximum-total-similarity injective assignment; teachers beyond the
    /// student pool size take their argmax.
    Hungarian,
    /// Softmax over each teacher's `k` most similar students.
    SoftTopK { k: usize, temperature: f64 },
}

impl Strategy {
    pub fn soft_default() -> Self {
        Strategy::SoftTopK { k: 5, temperature: 1.0 }
    }

    pub fn all_default() -> [Strategy; 3] {
        [Strategy::Greedy, Strategy::Hungarian, Strategy::soft_default()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Hungarian => "hungarian",
            Strategy::SoftTopK { .. } => "soft-topk",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::SoftTopK { k, temperature } => write!(f, "soft-topk(k={k},T={temperature})"),
            s => f.write_str(s.name()),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" | "greedy_nn" => Ok(Strategy::Greedy),
            "hungarian" => Ok(Strategy::Hungarian),
            "soft-topk" | "soft_topk" => Ok(Strategy::soft_default()),
            _ => Err(Error::InvalidArgument(format!("unknown strategy `{s}` (greedy, hungarian, soft-topk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub student: ComponentId,
    pub similarity: f64,
    /// 1 for greedy and Hungarian; softmax weight for soft top-k.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedTeacher {
    pub teacher: ComponentId,
    pub candidates: Vec<MatchCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub strategy: Strategy,
    pub top_k: Option<usize>,
    pub pairs: Vec<MatchedTeacher>,
}

/// Minimum-cost assignment of every row to a distinct column (rows ≤ cols).
/// Returns the column chosen for each row.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n > m || cost.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("assignment needs a rectangular matrix with rows <= cols".into()));
    }
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let (mut p, mut way) = (vec![0usize; m + 1], vec![0usize; m + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Maximum-total-similarity injective assignment over a teacher × student
/// similarity block. When teachers outnumber students, one assignment
/// fills every student and the teachers it leaves out fall back to their
/// argmax. Returns the student index for each teacher.
fn hungarian_assign(sim: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n_s = sim.first().map_or(0, Vec::len);
    if sim.len() <= n_s {
        let cost: Vec<Vec<f64>> = sim.iter().map(|row| row.iter().map(|s| -s).collect()).collect();
        return hungarian_min(&cost);
    }
    let cost: Vec<Vec<f64>> = (0..n_s).map(|s| sim.iter().map(|row| -row[s]).collect()).collect();
    let mut assigned: Vec<Option<usize>> = vec![None; sim.len()];
    for (s, t) in hungarian_min(&cost)?.into_iter().enumerate() {
        assigned[t] = Some(s);
    }
    Ok(assigned
        .into_iter()
        .zip(sim)
        .map(|(a, row)| a.unwrap_or_else(|| argmax_lowest(row)))
        .collect())
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Match teacher components to student components of the same kind.
///
/// With `top_k`, only each model's `top_k` most influential components
/// take part; teachers of a kind with no eligible student are left out.
pub fn match_components(
    teacher_influence: &InfluenceTable,
    student_influence: &InfluenceTable,
    sims: &PairSimilarities,
    strategy: Strategy,
    top_k: Option<usize>,
) -> Result<MatchSet> {
    if let Strategy::SoftTopK { k, temperature } = strategy {
        if k == 0 || !(temperature > 0.0) {
            return Err(Error::InvalidArgument("soft top-k needs k >= 1 and a positive temperature".into()));
        }
    }
    let (mut teachers, mut students): (Vec<ComponentId>, Vec<ComponentId>) =
        (teacher_influence.components().collect(), student_influence.components().collect());
    if let Some(k) = top_k {
        let (tt, ts) = (teacher_influence.top(k), student_influence.top(k));
        teachers.retain(|c| tt.contains(c));
        students.retain(|c| ts.contains(c));
    }
    teachers.sort();
    students.sort();
    let mut pairs = Vec::new();
    for kind in [ComponentKind::Mlp, ComponentKind::AttentionHead] {
        let tk: Vec<ComponentId> = teachers.iter().filter(|c| c.kind == kind).cloned().collect();
        let mut sk: Vec<ComponentId> = students.iter().filter(|c| c.kind == kind).cloned().collect();
        // Tie-break order among students: (layer, head).
        sk.sort_by_key(|c| (c.layer, c.head));
        if tk.is_empty() {
            continue;
        }
        if sk.is_empty() {
            if top_k.is_some() {
                continue;
            }
            return Err(Error::UnmatchedKind(format!("{kind:?}")));
        }
        let block: Vec<Vec<f64>> = tk
            .iter()
            .map(|&t| {
                sk.iter()
                    .map(|&s| sims.get(t, s).ok_or_else(|| Error::CacheMiss(format!("similarity {t} vs {s}"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let single = |t: usize, j: usize| MatchedTeacher {
            teacher: tk[t],
            candidates: vec![MatchCandidate { student: sk[j], similarity: block[t][j], weight: 1.0 }],
        };
        match strategy {
            Strategy::Greedy => {
                for t in 0..tk.len() {
                    pairs.push(single(t, argmax_lowest(&block[t])));
                }
            }
            Strategy::Hungarian => {
                for (t, j) in hungarian_assign(&block)?.into_iter().enumerate() {
                    pairs.push(single(t, j));
                }
            }
            Strategy::SoftTopK { k, temperature } => {
                for (t, row) in block.iter().enumerate() {
                    let mut order: Vec<usize> = (0..row.len()).collect();
                    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    order.truncate(k.min(row.len()));
                    let logits: Vec<f64> = order.iter().map(|&j| row[j]).collect();
                    let w = crate::tensor_math::softmax_with_temperature(&logits, temperature)?;
                    pairs.push(MatchedTeacher {
                        teacher: tk[t],
                        candidates: order
                            .iter()
                            .zip(w)
                            .map(|(&j, weight)| MatchCandidate { student: sk[j], similarity: row[j], weight })
                            .collect(),
                    });
                }
            }
        }
    }
    pairs.sort_by_key(|p| p.teacher);
    Ok(MatchSet { strategy, top_k, pairs })
}
