//! Block compressive sensing reconstruction with nonlocal structured-sparsity
//! priors.
//!
//! An image is measured block by block with a shared Gaussian matrix
//! ([`sampling`]). Reconstruction ([`solver`]) alternates three steps: similar
//! patches are stacked into groups ([`grouping`]), each group is passed through
//! one of the group-level proximal models in [`regularizers`], and the
//! aggregated estimate is pulled back towards the measurements by a per-block
//! least-squares update.

pub mod config;
pub mod dictionaries;
pub mod error;
pub mod grouping;
pub mod image;
mod linalg;
pub mod metrics;
pub mod pgm;
pub mod regularizers;
pub mod rng;
pub mod sampling;
pub mod shrinkage;
pub mod solver;
#[cfg(test)]
mod testutil;

pub use config::{RegularizerKind, SolverConfig};
pub use error::{Error, Result};
pub use image::{Image, Patch};
pub use rng::Rng;
pub use sampling::{BlockMeasurementOperator, MeasurementSet};

/// Re-exported so callers can build group matrices without naming nalgebra.
pub use nalgebra::{DMatrix, DVector};
