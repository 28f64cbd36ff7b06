//! Shared orthogonal spectral bases built from a library of fine-tuned
//! checkpoints, with adaptation restricted to per-layer diagonal coefficients.
//!
//! Pipeline, offline then online:
//!
//! 1. [`tensor_store`]: checkpoints, task vectors `Θ_i − Θ_0`, the BTC-v1 container file.
//! 2. [`spectral`]: per-layer thin SVDs, stacked top directions, polar orthogonalization.
//! 3. [`coefficients`]: projection onto the bases, closed-form diagonals, pooling, α sweep.
//! 4. [`adapt`]: supervised training of the diagonal coefficients only.
//! 5. [`tta`]: label-free test-time adaptation of the same coefficients.
//!
//! [`taskgen`] provides the synthetic related-task family and the two-layer
//! MLP everything is exercised on, and [`experiment`] wires the steps into the
//! end-to-end runs used by the CLI.

pub mod adapt;
pub mod coefficients;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod spectral;
pub mod taskgen;
pub mod tensor_store;
pub mod tta;

pub use coefficients::{SigmaOrigin, SigmaSet, SigmaVector};
pub use error::{BoltError, ParseError, Result};
pub use nalgebra::{DMatrix, DVector};
pub use spectral::{BasisSet, SpectralBasis, ThinSvd};
pub use taskgen::{LabeledSet, TaskFamily, ToyModel, UnlabeledSet};
pub use tensor_store::{Role, TaskVector, TensorContainer, TensorEntry};
