//! Keyframe selection, submap generation, and map summarization for LiDAR
//! pipelines.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod hessian;
pub mod io;
mod linalg;
mod par;
pub mod pipeline;
pub mod selector;
mod serde_inf;
pub mod submap;
pub mod summarizer;
pub mod synthworld;

pub use error::{Error, Result};
pub use linalg::SymmetricEigen3;
