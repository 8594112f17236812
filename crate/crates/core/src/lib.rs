//! Simulation and ergodicity diagnostics for SDEs and Galerkin-truncated
//! SPDEs driven by symmetric α-stable noise.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coupling;
pub mod dynamics;
pub mod error;
pub mod harris;
pub mod kernel_lab;
pub mod rng;
pub mod stable_noise;
pub mod stats;

pub use error::{Error, Result};
