//! Continuous 3D fields mapping position to density and color.

pub mod analytic;
mod hash_grid;
mod mlp;
mod volume;

pub use hash_grid::{HashGrid, HashGridConfig};
pub use mlp::{Mlp, MlpGrad, MlpTape, TangentTape};
pub use volume::{FieldConfig, FieldGrad, FieldTape, VolumeField};

use crate::{Result, Vec3};

/// Normal returned where the density gradient vanishes.
pub const DEGENERATE_NORMAL: [f64; 3] = [0.0, 1.0, 0.0];

/// Gradient magnitude below which a normal is flagged degenerate.
pub const NORMAL_EPSILON: f64 = 1e-8;

/// Densities and colors for a batch of positions, aligned with the input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldSamples {
    pub density: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Anything the volume renderer can integrate.
pub trait RadianceField {
    /// Half-extent of the cube the field is defined on.
    fn bound(&self) -> f64;

    fn query(&self, positions: &[Vec3]) -> Result<FieldSamples>;

    /// Spatial gradient of the activated density.
    fn density_gradients(&self, positions: &[Vec3]) -> Result<Vec<Vec3>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normals {
    pub normals: Vec<Vec3>,
    pub degenerate: Vec<bool>,
}

/// Outward normals `-grad(sigma) / |grad(sigma)|`.
pub fn normals_at<F: RadianceField + ?Sized>(field: &F, positions: &[Vec3]) -> Result<Normals> {
    let grads = field.density_gradients(positions)?;
    let mut normals = Vec::with_capacity(grads.len());
    let mut degenerate = Vec::with_capacity(grads.len());
    for g in grads {
        let norm = g.norm();
        if norm < NORMAL_EPSILON {
            normals.push(Vec3::from(DEGENERATE_NORMAL));
            degenerate.push(true);
        } else {
            normals.push(-g / norm);
            degenerate.push(false);
        }
    }
    Ok(Normals { normals, degenerate })
}
