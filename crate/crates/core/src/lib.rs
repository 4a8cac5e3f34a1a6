//! Variable-rate learned image compression built around a parametric
//! sum-of-tanh quantizer.
//!
//! One trained *anchor* codec serves many bitrates: only its two quantizer
//! layers are refined (a *derivation*) or interpolated between trained
//! layers. The crate covers training, real range-coded bitstreams and
//! rate-distortion evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod annealing;
pub mod entropy;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
pub mod image;
pub mod codec;
pub mod eval;
