//! Heat kernel of `L = Δ + S^b`, where `S^b` is a bounded, symmetric,
//! state-dependent nonlocal perturbation with jump kernel `b(x,z)/|z|^{d+β}`.
//!
//! The crate builds the fundamental solution `q(t,x,y)` by iterating the
//! Duhamel formula starting from the Gaussian, cross-checks it against a
//! Fourier-inversion oracle for translation-invariant coefficients, simulates
//! the associated jump diffusion by Euler stepping plus thinned jumps, and
//! turns the catalogue of two-sided kernel estimates into executable checks.

pub mod coefficients;
pub mod duhamel;
pub mod error;
pub mod estimates;
pub mod kernels;
pub mod nonlocal;
pub mod oracle;
pub mod sim;
pub mod table;

pub use coefficients::{Coefficient, CoefficientSpec, ModelParams};
pub use error::NlError;
pub use table::{KernelTable, SpaceTimeGrid};
