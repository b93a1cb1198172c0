//! Polycrystal texture-to-property pipeline.
//!
//! The crate covers the full chain from crystallographic texture to
//! homogenized mechanical response:
//!
//! - [`orientation`]: quaternion algebra, cubic fundamental-zone reduction,
//!   Voigt stiffness rotation.
//! - [`texture`]: discrete ODFs on a fundamental-zone grid, hierarchical
//!   simplex sampling of the texture hull, parametric texture families.
//! - [`rve`]: periodic Voronoi polycrystal synthesis and voxel tensors.
//! - [`fft`]: linear-elastic spectral homogenization (ground-truth labels).
//! - [`odmn`]: orientation-aware deep material network — analytic linear
//!   homogenization with exact parameter gradients and offline training.
//! - [`cp`]: phenomenological FCC crystal plasticity (local law + tangent).
//! - [`online`]: finite-strain ODMN prediction driver with mixed control.
//! - [`mae`]: toy-scale 3D masked autoencoder with reverse-mode autodiff.
//! - [`pipeline`]: dataset generation, labeling, training entry points and
//!   metrics used by the command-line interface.
//!
//! Conventions used throughout (documented once here):
//! - Voigt index order 11, 22, 33, 23, 13, 12 with engineering shear
//!   convention: strain vectors carry doubled shear components, stress
//!   vectors do not. Stiffness in GPa.
//! - Euler angles are Bunge Z–X–Z: `R(α,β,γ) = Rz(α)·Rx(β)·Rz(γ)`.
//! - Quaternions are canonical-sign: `w ≥ 0`, ties resolved on the first
//!   nonzero vector component.

pub mod cp;
pub mod fft;
pub mod mae;
pub mod odmn;
pub mod oracles;
pub mod online;
pub mod orientation;
pub mod parallel;
pub mod pipeline;
pub mod rve;
pub mod texture;

pub use orientation::{EulerBunge, RotationMatrix, StiffnessVoigt, UnitQuaternion};
