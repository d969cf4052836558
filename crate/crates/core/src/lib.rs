//! Manifold-aware graph learning: spherical geodesic message passing,
//! parameter-free aggregation experiments, and a local-PCA measure of how
//! far aggregated features drift from the original feature manifold.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod drift;
pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod smoothing;
pub mod sphere;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
