//! Fractional denoising for molecular pre-training: chemical-aware noise,
//! its linearization, a toy potential-energy surface for labels, a small
//! equivariant network with reverse-mode autodiff, and training loops.

pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod geometry;
pub mod linearize;
pub mod metrics;
pub mod pes;
pub mod molgraph;
pub mod net;
pub mod rng;
pub mod train;

pub use error::{FradError, Result};
pub use geometry::noise::{NoiseKind, NoiseSpec, PerturbationRecord};
pub use molgraph::{Bond, Conformation, Element, Molecule, RotatableBond};
pub use rng::FradRng;
