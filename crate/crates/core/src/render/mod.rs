//! Ray generation, differentiable volume rendering and turntable export.

mod camera;
pub mod composite;
mod turntable;
mod volume;

pub use camera::{generate_rays, CameraPose, Rays};
pub use turntable::{export_turntable, turntable_poses, TurntableFrame};
pub use volume::{render, render_backward, render_train, RenderTape};

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Uniform random color drawn once per render.
    Random,
    White,
    Black,
    Color([f64; 3]),
}

impl Background {
    pub fn resolve<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        match self {
            Background::Random => [rng.random(), rng.random(), rng.random()],
            Background::White => [1.0; 3],
            Background::Black => [0.0; 3],
            Background::Color(c) => *c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    pub background: Background,
    /// Jitter sample positions within their bins.
    pub stratified: bool,
    /// Opacity above which the normal map is defined.
    pub normal_threshold: f64,
    /// Samples with rendering weight below this skip normal evaluation.
    pub normal_weight_cutoff: f64,
    pub compute_normals: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: 0.1,
            far: 100.0,
            samples_per_ray: 64,
            background: Background::White,
            stratified: false,
            normal_threshold: 0.5,
            normal_weight_cutoff: 1e-4,
            compute_normals: true,
        }
    }
}

/// Per-view outputs consumed by every loss. Arrays are `(row, col[, channel])`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Array3<f64>,
    /// Expected ray distance normalized by opacity, 0 where uncovered.
    pub depth: Array2<f64>,
    pub opacity: Array2<f64>,
    /// Unit normals where opacity exceeds the threshold, zero elsewhere.
    pub normal_map: Array3<f64>,
}

impl RenderOutput {
    pub fn blank(height: usize, width: usize, background: [f64; 3]) -> Self {
        let mut image = Array3::zeros((height, width, 3));
        for c in 0..3 {
            image.index_axis_mut(ndarray::Axis(2), c).fill(background[c]);
        }
        Self {
            image,
            depth: Array2::zeros((height, width)),
            opacity: Array2::zeros((height, width)),
            normal_map: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.opacity.nrows()
    }

    pub fn width(&self) -> usize {
        self.opacity.ncols()
    }

    pub(crate) fn write_pixel(&mut self, row: usize, col: usize, px: &composite::Composite, normal_threshold: f64) {
        for c in 0..3 {
            self.image[[row, col, c]] = px.color[c];
        }
        self.opacity[[row, col]] = px.opacity;
        self.depth[[row, col]] = px.depth();
        let n: Vec3 = px.normal(normal_threshold);
        for c in 0..3 {
            self.normal_map[[row, col, c]] = n[c];
        }
    }
}

/// Cotangents on a [`RenderOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub image: Array3<f64>,
    pub depth: Array2<f64>,
    pub opacity: Array2<f64>,
    pub normal_map: Array3<f64>,
}

impl RenderGrad {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            image: Array3::zeros((height, width, 3)),
            depth: Array2::zeros((height, width)),
            opacity: Array2::zeros((height, width)),
            normal_map: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.opacity.nrows()
    }

    pub fn width(&self) -> usize {
        self.opacity.ncols()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &RenderGrad, scale: f64) {
        self.image.scaled_add(scale, &other.image);
        self.depth.scaled_add(scale, &other.depth);
        self.opacity.scaled_add(scale, &other.opacity);
        self.normal_map.scaled_add(scale, &other.normal_map);
    }

    pub(crate) fn pixel(&self, row: usize, col: usize) -> composite::PixelGrad {
        composite::PixelGrad {
            color: [
                self.image[[row, col, 0]],
                self.image[[row, col, 1]],
                self.image[[row, col, 2]],
            ],
            opacity: self.opacity[[row, col]],
            depth: self.depth[[row, col]],
            normal: [
                self.normal_map[[row, col, 0]],
                self.normal_map[[row, col, 1]],
                self.normal_map[[row, col, 2]],
            ],
        }
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mse = (a - b).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
