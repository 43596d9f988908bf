//! Simulation and estimation toolkit for over-the-air reciprocity calibration
//! of fully-connected hybrid-beamforming mmWave MIMO links.
//!
//! The crate is organized bottom-up:
//!
//! - [`mathkit`]: dense complex linear algebra (products, structured products,
//!   vectorization, least squares, SVD) used by every other module.
//! - [`streams`]: reproducible labeled RNG sub-streams derived from one master seed.
//! - [`channel`]: geometric mmWave channel and hardware mismatch generation.
//! - [`pilots`]: training-schedule construction (pilot matrices, stage beamformers)
//!   and pilot-length validation.
//! - [`airlink`]: over-the-air downlink/uplink training simulation.
//! - [`hac`]: hierarchical-absolute calibration solvers (closed-form digital stage,
//!   alternating analog stage with angle refinement).
//! - [`crc`]: conventional relative-calibration baseline and overhead accounting.
//! - [`crlb`]: Cramér-Rao lower bounds for the mismatch coefficients.
//! - [`eval`]: metrics (NMSE, achievable rate) and the Monte-Carlo sweep harness.

// Index-based loops are the clearer idiom for the matrix kernels here.
#![allow(clippy::needless_range_loop)]

pub mod airlink;
pub mod channel;
pub mod crc;
pub mod crlb;
pub mod eval;
pub mod hac;
pub mod mathkit;
pub mod pilots;
pub mod streams;

pub use num_complex::Complex64;
