//! Visuo-tactile diffusion policies with contact-gated torque fusion.
//!
//! The crate bundles a small deterministic manipulation simulator, a DDPM
//! action sampler with a compact temporal U-Net, several ways of fusing
//! joint-torque history with visual features, and the training/evaluation
//! harness used to compare them.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod selftest;
pub mod simenv;
pub mod store;

pub use error::{Error, Result};
