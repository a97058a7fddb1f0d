//! Two-stage cascade inference of post-training-quantised CNNs, end to
//! end in software: dynamic fixed-point quantisation and scheme search,
//! gBvSB confidence gating, tiled matrix-multiplication execution with
//! exact cycle accounting, roofline design-space exploration, and the
//! batch-level cascade time model.
//!
//! The flow mirrors a two-stage accelerator: a low-precision unit
//! processes every sample, a confidence evaluation unit keeps or
//! forwards each prediction, and a high-precision unit re-processes the
//! forwarded ones after a device reconfiguration.

pub mod cascade;
pub mod ceu;
pub mod dataset;
pub mod dse;
pub mod engine;
pub mod error;
pub mod fixedpoint;
pub mod fixture;
pub mod netmodel;
pub mod quantizer;

pub use error::{Error, Result};
