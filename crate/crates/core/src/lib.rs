//! Precomputed lens transport maps.
//!
//! A ground-truth sequential ray tracer for spherical lens systems, a
//! factorized neural model (per-path validity classifier + exit regressor)
//! trained on tracer output, and two renderers — forward lens flare and
//! backward depth of field — that run on either backend.

pub mod dataset;
pub mod datagen;
pub mod error;
pub mod lens;
pub mod nn;
pub mod paraxial;
pub mod render;
pub mod spectrum;
pub mod trace;

pub use error::{Error, Result};
