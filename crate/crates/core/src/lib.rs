//! Harmonic analysis on SO(3) and the sphere, Fourier-domain pointwise
//! nonlinearities for steerable features, and input-adaptive sampling matrices
//! that make those nonlinearities exactly rotation equivariant.

pub mod activation;
pub mod adaptive;
pub mod bench;
pub mod bundle;
pub mod data;
pub mod diagnostics;
pub mod equivariance;
pub mod error;
pub mod fourier;
pub mod harmonics;
pub mod model;
pub mod nonlin;
pub mod reptypes;
pub mod rotations;
pub mod serde_matrix;
pub mod tape;

pub use activation::Activation;
pub use error::{Error, Result};
