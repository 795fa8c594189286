// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mechanistic model diffing for transformer teacher/student pairs.
//!
//! The crate extracts task circuits by mean ablation and path patching,
//! compares components across models, and scores how well a student's
//! circuit aligns with its teacher's, weighting agreement by influence.

pub mod alignment;
pub mod analysis;
pub mod circuit;
pub mod error;
pub mod exec;
pub mod intervention;
pub mod model;
pub mod report;
pub mod task;
pub mod tensor_math;
pub mod toy;

pub use error::{Error, Result};
pub use exec::Exec;
