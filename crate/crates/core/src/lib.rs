//! Dense non-rigid shape correspondence.
//!
//! Two triangle meshes are embedded in a product space of Laplace–Beltrami
//! eigenfunctions, smoothed coordinates and normals. Learned spectral
//! filters applied to SHOT descriptors seed an entropic optimal transport
//! coupling, which is then refined coarse-to-fine by alternating
//! Sinkhorn projections with least-squares deformation solves. The whole
//! pipeline is differentiable, so the filters can be trained without
//! ground truth by minimizing the final alignment energy.

pub mod cache;
pub mod config;
pub mod error;
pub mod eval;
pub mod filters;
pub mod grad;
mod io;
pub mod mesh;
pub mod shells;
pub mod shot;
pub mod spectral;
pub mod transport;

pub use error::{Error, Result};
