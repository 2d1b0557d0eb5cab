//! Localization by matching vectorized map elements against bird's-eye-view
//! feature grids.
//!
//! The pipeline has three stages:
//!
//! 1. [`matcher`] turns map elements into per-element *map embeddings* with a
//!    small transformer decoder that cross-attends into the BEV grid.
//! 2. [`solver`] scores a 3-DoF grid of candidate pose offsets by bilinearly
//!    sampling the BEV pyramid at the projected elements, turns the scores into
//!    a posterior and refines the estimate over three pyramid levels.
//! 3. [`training`] provides the losses and a reverse-mode gradient path through
//!    the whole forward pass.
//!
//! [`synth`] generates synthetic road scenes and an oracle BEV renderer that
//! stands in for real sensor encoders; [`harness`] runs experiments and
//! computes localization metrics.

pub mod autodiff;
pub mod bev;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod map;
pub mod matcher;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Shared numeric text encoding: 17 significant digits, exact round-trip.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
