//! Weakly supervised temporal anomaly segmentation.
//!
//! A dilated causal CNN produces per-point anomaly scores for a multivariate
//! series. Training uses only one binary label per instance: a binary
//! cross-entropy term on a pooled global score, plus a margin loss on the
//! soft-DTW alignment cost between the local scores and a sequential
//! pseudo-label derived from the model's own activation map. At test time the
//! hard alignment with the pseudo-label cuts each instance into
//! variable-length normal/anomalous segments.
//!
//! Modules, bottom-up:
//!
//! - [`series`]: instances, datasets, CSV layout, synthetic generator
//! - [`model`]: the dilated causal CNN scorer with an analytic backward pass
//! - [`dtw`]: constrained (soft-)DTW forward, backward and hard decoding
//! - [`pseudolabel`]: activation-map normalization and sequential pseudo-labels
//! - [`eval`]: point/instance metrics, threshold sweeps and AUROC
//! - [`training`]: loss assembly, Adam, epoch loop, threshold selection
//! - [`inference`]: test-time segmentation

pub mod dtw;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod pseudolabel;
pub mod series;
pub mod training;

pub use error::{Error, Result};
