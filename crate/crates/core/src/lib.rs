//! Dataset condensation by decomposed distribution matching.
//!
//! A small learnable image set is optimized so that, under freshly sampled
//! random ConvNets, its per-class embedding means (content), feature-map
//! moments and Gram correlations (style) match those of the real data, while
//! an intra-class KL penalty keeps synthetic samples apart.

pub mod autodiff;
pub mod condense;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod network;
pub mod table;

pub use autodiff::{Graph, Real, Tensor, Var};
pub use error::{Error, Result};
