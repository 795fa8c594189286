// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal directions of a row-centered activation matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Leading principal directions with their variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// Unit-norm directions, one per component, in descending-variance order.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues (1/(n-1) normalization), descending.
    pub variances: Vec<f64>,
    /// Fewer than `k` directions carried variance; the rest are zero-variance
    /// orthonormal padding.
    pub rank_deficient: bool,
}

impl PcaBasis {
    /// Number of components that carry non-zero variance.
    pub fn effective_rank(&self) -> usize {
        self.variances.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Top-3 principal components of `activations` (rows = observations).
pub fn pca_top3(activations: &Matrix) -> Result<PcaBasis> {
    pca_top_k(activations, 3)
}

/// Top-`k` principal components.
///
/// Uses the `d x d` covariance when there are at least as many observations as
/// features, and the `n x n` Gram matrix otherwise. Each component's sign is
/// fixed so its largest-magnitude entry is positive.
pub fn pca_top_k(activations: &Matrix, k: usize) -> Result<PcaBasis> {
    let (n, d) = (activations.rows(), activations.cols());
    if n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "PCA of {k} components needs at least {} rows, got {n}",
            k + 1
        )));
    }
    if d < k {
        return Err(Error::InvalidArgument(format!(
            "PCA of {k} components needs at least {k} columns, got {d}"
        )));
    }
    let centered = activations.centered();
    let x = DMatrix::from_row_slice(n, d, centered.data());
    let denom = (n - 1) as f64;

    let (mut values, mut vectors): (Vec<f64>, Vec<Vec<f64>>) = if n - 1 >= d {
        let cov = (x.transpose() * &x) / denom;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        order
            .into_iter()
            .take(k)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
            .unzip()
    } else {
        let gram = (&x * x.transpose()) / denom;
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        order
            .into_iter()
            .take(k)
            .map(|i| {
                let lambda = eig.eigenvalues[i];
                let u = x.transpose() * eig.eigenvectors.column(i);
                (lambda, u.iter().copied().collect::<Vec<f64>>())
            })
            .unzip()
    };

    let scale = values.first().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    let mut rank_deficient = false;
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (lambda, v) in values.iter_mut().zip(vectors.iter_mut()) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if *lambda <= tol || norm == 0.0 || *lambda <= 0.0 {
            *lambda = 0.0;
            rank_deficient = true;
            v.clear();
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
            kept.push(v.clone());
        }
    }
    if rank_deficient {
        // Replace zero-variance directions with an orthonormal completion.
        let mut out = kept.clone();
        let mut basis = 0;
        while out.len() < k {
            let mut cand = vec![0.0; d];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for u in &out {
                    let dot: f64 = cand.iter().zip(u).map(|(a, b)| a * b).sum();
                    cand.iter_mut().zip(u).for_each(|(c, b)| *c -= dot * b);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cand.iter_mut().for_each(|x| *x /= norm);
                out.push(cand);
            }
        }
        vectors = out;
        let mut vars: Vec<f64> = values.into_iter().filter(|&v| v > 0.0).collect();
        vars.resize(k, 0.0);
        values = vars;
    }
    for v in &mut vectors {
        fix_sign(v);
    }
    Ok(PcaBasis {
        components: vectors,
        variances: values,
        rank_deficient,
    })
}

fn descending(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx
}

/// Make the largest-magnitude entry positive (first index wins ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
