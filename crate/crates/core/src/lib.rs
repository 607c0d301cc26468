//! Single-image 3D object generation by score distillation.
//!
//! A coarse volumetric field is optimized against pluggable noise-prediction
//! backends, then handed off to a deformable tetrahedral SDF for refinement.
//! Analytic oracle backends stand in for pretrained diffusion models so that
//! every stage of the pipeline can be checked end to end without external
//! weights.

pub mod error;
pub mod eval;
pub mod field;
pub mod guidance;
pub mod io;
pub mod losses;
pub mod optim;
pub mod render;
pub mod tet;
pub mod train;

mod math;

pub use error::{Error, Result};
pub use math::Vec3;
