//! Differentially private training for similarity-based (non-decomposable)
//! losses by clipping the gradient of every pairwise similarity logit.
//!
//! The per-step mechanism clips each `g_ij = ∇_w S(Φ_w(x_i), Φ_w(x'_j))` to
//! norm `B`, aggregates the clipped gradients with the loss's logit partial
//! derivatives, and adds Gaussian noise scaled to a sensitivity that does not
//! grow with the batch size.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregation;
pub mod autodiff;
pub mod data;
pub mod dp;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod properties;
pub mod sensitivity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
