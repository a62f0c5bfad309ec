//! Fourier integral operators with rough phases, discretized on polar
//! frequency grids.
//!
//! The crate covers the dyadic frequency and angular decompositions, the
//! boundedness and almost-orthogonality measurements built on them, the
//! TT* kernel of a single angular piece, and the half-wave parametrix data
//! solve at the initial time.

pub mod cis;
pub mod dyadic;
pub mod error;
pub mod fio;
pub mod grid;
pub mod kernel;
pub mod parametrix;
pub mod phase;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use nalgebra::{Matrix3, Vector3};
pub use num_complex::Complex64;

/// The continuum Plancherel factor (2π)^{3/2} of the unnormalized synthesis.
pub const FLAT_PLANCHEREL: f64 = 15.749_609_945_722_419;
