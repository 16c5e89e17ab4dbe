//! Self-supervised world models on synthetic physical systems, and the tools
//! to measure what their frozen representations encode.
//!
//! The crate is organised by pipeline stage:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`dynamics`] | ground-truth trajectories, splits, target quantities |
//! | [`worldmodel`] | residual next-state predictor, training, activations |
//! | [`probes`] | time-invariant linear probe, baselines, fine-tuning, metrics |
//! | [`mechanics`] | CKA, parameter drift, concept erasure, layer scans, PCA |
//! | [`symreg`] | genetic-programming symbolic regression and law selection |
//! | [`bound`] | curvature estimates and probe-error bound validation |

pub mod bound;
pub mod dynamics;
pub mod error;
pub mod mechanics;
pub mod nn;
pub mod probes;
pub mod stats;
pub mod symreg;
pub mod worldmodel;

pub use error::{Error, Result};
