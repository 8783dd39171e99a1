//! Lifting per-view 2D mask semantics into a Gaussian-splat scene through
//! 2-byte mask indices, single-step mask clustering and cluster-level queries.

// Negated comparisons such as `!(x > 0.0)` are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod error;
pub mod eval;
pub mod injection;
pub mod pipeline;
pub mod query;
pub mod rasterizer;
pub mod scene_io;
pub mod synth;

pub use error::{Error, Result};
