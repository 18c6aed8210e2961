//! Battery state-of-health estimation from incremental-capacity features.
//!
//! Constant-current charge data is turned into smoothed dQ/dV curves
//! ([`ic_analysis`]), sampled at fixed voltages to form health features, and
//! regressed onto state of health with an exact Gaussian process ([`gpr`]).
//! [`evaluation`] wires the steps together and scores the predictions.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset_io;
pub mod gpr;
pub mod ic_analysis;
pub mod evaluation;
pub mod export;
pub mod synthetic;
