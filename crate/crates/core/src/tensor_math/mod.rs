// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric kernels shared by every analysis stage.
//!
//! All statistics here run in `f64`, regardless of the precision the model
//! engine computes in.

mod bootstrap;
mod matrix;
mod pca;
mod prob;
mod stats;

pub use bootstrap::{bootstrap_ci, quantile_sorted, BootstrapSummary};
pub use matrix::Matrix;
pub use pca::{pca_top3, pca_top_k, PcaBasis};
pub use prob::{cosine_similarity, cosine_similarity_f32, kl_divergence, log_softmax, softmax_with_temperature};
pub use stats::{mean, ranks, spearman, std_dev};
