use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Orbit camera around `look_at`. Azimuth 0 sits on the +z axis, positive
/// elevation looks down from above, +y is up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    #[serde(default)]
    pub look_at: [f64; 3],
}

impl Default for CameraPose {
    fn default() -> Self {
        Self {
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            radius: 2.5,
            fov_y_deg: 40.0,
            look_at: [0.0; 3],
        }
    }
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_y_deg: f64) -> Self {
        Self {
            azimuth_deg,
            elevation_deg,
            radius,
            fov_y_deg,
            look_at: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.azimuth_deg, self.elevation_deg, self.radius, self.fov_y_deg]
            .iter()
            .chain(self.look_at.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidPose("non-finite pose parameter".into()));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::InvalidPose(format!(
                "fov_y {} must lie in (0, 180) degrees",
                self.fov_y_deg
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidPose(format!("radius {} must be positive", self.radius)));
        }
        if self.elevation_deg.abs() >= 90.0 {
            return Err(Error::InvalidPose(format!(
                "elevation {} must lie strictly between -90 and 90 degrees",
                self.elevation_deg
            )));
        }
        Ok(())
    }

    pub fn eye(&self) -> Vec3 {
        let az = self.azimuth_deg.to_radians();
        let el = self.elevation_deg.to_radians();
        Vec3::from(self.look_at)
            + Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * self.radius
    }

    pub fn forward(&self) -> Vec3 {
        (Vec3::from(self.look_at) - self.eye()).normalize()
    }

    /// Camera-to-world rotation with columns `[right, up, -forward]`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = self.forward();
        let right = forward.cross(&Vec3::y()).normalize();
        let up = right.cross(&forward);
        Matrix3::from_columns(&[right, up, -forward])
    }

    /// `tan(fov_y / 2)`: half the vertical image extent at unit depth.
    pub fn tan_half_fov(&self) -> f64 {
        (self.fov_y_deg.to_radians() * 0.5).tan()
    }

    /// Camera-space direction through the center of pixel `(row, col)`,
    /// on the plane `z = -1`.
    pub fn pixel_slope(&self, row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
        let t = self.tan_half_fov();
        let aspect = width as f64 / height as f64;
        let x = ((col as f64 + 0.5) / width as f64 * 2.0 - 1.0) * t * aspect;
        let y = (1.0 - (row as f64 + 0.5) / height as f64 * 2.0) * t;
        (x, y)
    }
}

/// One ray per pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Rays {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl Rays {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Pinhole rays through pixel centers.
pub fn generate_rays(pose: &CameraPose, height: usize, width: usize) -> Result<Rays> {
    pose.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("image size must be at least 1x1"));
    }
    let rotation = pose.rotation();
    let eye = pose.eye();
    let mut directions = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let (x, y) = pose.pixel_slope(row, col, height, width);
            directions.push((rotation * Vec3::new(x, y, -1.0)).normalize());
        }
    }
    Ok(Rays {
        height,
        width,
        origins: vec![eye; height * width],
        directions,
    })
}
