// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ComponentId, HookPoint, HookSet, Interventions, ModelBundle, Site};
use crate::task::TaskDataset;
use crate::tensor_math::{pca_top3, Matrix, PcaBasis};

/// Which prompt positions contribute activation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSelect {
    #[default]
    All,
    Final,
}

/// Stacked activations of one hook per layer: rows are (example, position).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub model: String,
    pub site: Site,
    pub layers: Vec<Matrix>,
}

/// Stack `site` (a whole-layer site such as `mlp_out`) for every layer.
pub fn collect_layer_activations(
    model: &ModelBundle,
    ds: &TaskDataset,
    site: Site,
    positions: PositionSelect,
    exec: Exec,
) -> Result<LayerActivations> {
    if site.is_per_head() || site == Site::Logits {
        return Err(Error::InvalidArgument(format!("site {} is not a per-layer stream", site.name())));
    }
    let nl = model.config.n_layers;
    let hooks: HookSet = (0..nl).map(|l| HookPoint::new(l, site)).collect();
    let none = Interventions::none();
    let caches = exec.try_map(&ds.examples, |e| model.forward(&e.prompt_tokens, &hooks, &none).map(|o| o.cache))?;
    let mut layers = Vec::with_capacity(nl);
    for l in 0..nl {
        let hook = HookPoint::new(l, site);
        let mut rows = Vec::new();
        for cache in &caches {
            let t = cache.get(&hook)?;
            let range = match positions {
                PositionSelect::All => 0..t.rows(),
                PositionSelect::Final => t.rows() - 1..t.rows(),
            };
            for p in range {
                rows.push(t.row(p).iter().map(|&v| v as f64).collect());
            }
        }
        layers.push(Matrix::from_rows(&rows)?);
    }
    Ok(LayerActivations { model: model.name.clone(), site, layers })
}

/// MLP output activations of every layer.
pub fn collect_mlp_activations(
    model: &ModelBundle,
    ds: &TaskDataset,
    positions: PositionSelect,
    exec: Exec,
) -> Result<LayerActivations> {
    collect_layer_activations(model, ds, Site::MlpOut, positions, exec)
}

/// Mean |cos| between matching principal directions, over the directions
/// both bases actually carry (at most 3). Returns the value and how many
/// directions were used; no shared direction gives 0.
pub fn pca_similarity(a: &PcaBasis, b: &PcaBasis) -> Result<(f64, usize)> {
    let k = a.effective_rank().min(b.effective_rank()).min(a.components.len()).min(b.components.len());
    if k == 0 {
        return Ok((0.0, 0));
    }
    let mut total = 0.0;
    for i in 0..k {
        let (u, v) = (&a.components[i], &b.components[i]);
        if u.len() != v.len() {
            return Err(Error::DimensionMismatch(format!(
                "principal directions of width {} and {}",
                u.len(),
                v.len()
            )));
        }
        total += crate::tensor_math::cosine_similarity(u, v)?.abs();
    }
    Ok((total / k as f64, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub row_model: String,
    pub col_model: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Principal directions each entry was averaged over (3 unless rank
    /// deficient).
    pub n_directions: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn rank_deficient(&self) -> bool {
        self.n_directions.iter().flatten().any(|&k| k < 3)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component");
        for c in &self.col_labels {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            s.push_str(label);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Top-3 PCA basis of each layer's activations.
pub fn layer_bases(acts: &LayerActivations, exec: Exec) -> Result<Vec<PcaBasis>> {
    exec.try_map(&acts.layers, pca_top3)
}

/// Entry (i, j): mean |cos| between the top-3 principal directions of
/// MLP i in the first model and MLP j in the second.
pub fn mlp_similarity_matrix(a: &LayerActivations, b: &LayerActivations, exec: Exec) -> Result<SimilarityMatrix> {
    let (ba, bb) = (layer_bases(a, exec)?, layer_bases(b, exec)?);
    let mut values = Vec::with_capacity(ba.len());
    let mut n_directions = Vec::with_capacity(ba.len());
    for pa in &ba {
        let row = bb.iter().map(|pb| pca_similarity(pa, pb)).collect::<Result<Vec<_>>>()?;
        values.push(row.iter().map(|r| r.0).collect());
        n_directions.push(row.iter().map(|r| r.1).collect());
    }
    let labels = |n: usize| (0..n).map(|l| ComponentId::mlp(l).to_string()).collect();
    Ok(SimilarityMatrix {
        row_model: a.model.clone(),
        col_model: b.model.clone(),
        row_labels: labels(ba.len()),
        col_labels: labels(bb.len()),
        values,
        n_directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planted(rows: usize, dims: &[usize], seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let mut r = vec![0.0; 12];
                for (i, &d) in dims.iter().enumerate() {
                    r[d] = rng.random_range(-1.0..1.0) * (3 - i.min(2)) as f64;
                }
                r
            })
            .collect();
        Matrix::from_rows(&data).unwrap()
    }

    fn acts(name: &str, layers: Vec<Matrix>) -> LayerActivations {
        LayerActivations { model: name.into(), site: Site::MlpOut, layers }
    }

    #[test]
    fn orthogonal_subspaces_score_low_and_self_scores_one() {
        let a = acts("a", vec![planted(200, &[0, 1, 2], 1), planted(200, &[6, 7, 8], 2)]);
        let b = acts("b", vec![planted(200, &[3, 4, 5], 3), planted(200, &[0, 1, 2], 4)]);
        let m = mlp_similarity_matrix(&a, &b, Exec::Sequential).unwrap();
        assert!(m.get(0, 0) < 0.1);
        assert!(m.get(1, 0) < 0.1);
        let s = mlp_similarity_matrix(&a, &a, Exec::Sequential).unwrap();
        for i in 0..2 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
        }
        let t = mlp_similarity_matrix(&b, &a, Exec::Sequential).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.get(i, j) - t.get(j, i)).abs() < 1e-12);
            }
        }
        assert!(m.to_csv().starts_with("component,L0.MLP,L1.MLP\nL0.MLP,"));
    }

    #[test]
    fn rank_deficient_entries_are_flagged() {
        let a = acts("a", vec![planted(50, &[0], 5)]);
        let m = mlp_similarity_matrix(&a, &a, Exec::Sequential).unwrap();
        assert_eq!(m.n_directions[0][0], 1);
        assert!(m.rank_deficient());
        assert!((m.get(0, 0) - 1.0).abs() < 1e-9);
    }
}
