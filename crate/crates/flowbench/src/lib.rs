//! flowbench: a desk-scale workbench for rectified flow matching on
//! synthetic low-dimensional distributions.
//!
//! The crate trains small velocity-field models with either the standard
//! single-target flow-matching objective or a posterior-weighted multi-target
//! variant, and ships the evaluation tooling (analytic velocity oracle,
//! gradient-variance probes, samplers, distribution distances) needed to
//! compare the two. Everything is deterministic given a seed: repeated runs
//! with the same resolved configuration produce bitwise-identical artifacts
//! on the same platform.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod path;
pub mod posterior;
pub mod rng;
pub mod svg;
pub mod train;

pub use error::{Error, Result};
