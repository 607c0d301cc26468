//! Closed-form fields used as ground truth and test doubles.

use super::{FieldSamples, RadianceField};
use crate::{Result, Vec3};

/// `sigma(p) = amplitude * exp(-|p|^2 / width^2)` with a constant color.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    pub amplitude: f64,
    pub width: f64,
    pub color: [f64; 3],
    pub bound: f64,
}

impl GaussianDensity {
    /// `sigma(p) = exp(-|p|^2)` on a cube of half-extent 2.
    pub fn unit() -> Self {
        Self {
            amplitude: 1.0,
            width: 1.0,
            color: [0.5; 3],
            bound: 2.0,
        }
    }
}

impl RadianceField for GaussianDensity {
    fn bound(&self) -> f64 {
        self.bound
    }

    fn query(&self, positions: &[Vec3]) -> Result<FieldSamples> {
        Ok(FieldSamples {
            density: positions
                .iter()
                .map(|p| self.amplitude * (-p.norm_squared() / (self.width * self.width)).exp())
                .collect(),
            color: vec![self.color; positions.len()],
        })
    }

    fn density_gradients(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        let w2 = self.width * self.width;
        Ok(positions
            .iter()
            .map(|p| p * (-2.0 / w2 * self.amplitude * (-p.norm_squared() / w2).exp()))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformField {
    pub density: f64,
    pub color: [f64; 3],
    pub bound: f64,
}

impl UniformField {
    pub fn new(density: f64, color: [f64; 3], bound: f64) -> Self {
        Self {
            density,
            color,
            bound,
        }
    }
}

impl RadianceField for UniformField {
    fn bound(&self) -> f64 {
        self.bound
    }

    fn query(&self, positions: &[Vec3]) -> Result<FieldSamples> {
        Ok(FieldSamples {
            density: vec![self.density; positions.len()],
            color: vec![self.color; positions.len()],
        })
    }

    fn density_gradients(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        Ok(vec![Vec3::zeros(); positions.len()])
    }
}

/// Solid sphere with a smooth shell and a procedural color pattern that
/// varies with azimuth and height, so every view of it differs.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedSphere {
    pub radius: f64,
    /// Interior density.
    pub density: f64,
    /// Shell width of the density falloff.
    pub softness: f64,
    pub bound: f64,
}

impl Default for TexturedSphere {
    fn default() -> Self {
        Self {
            radius: 0.5,
            density: 60.0,
            softness: 0.01,
            bound: 1.0,
        }
    }
}

impl TexturedSphere {
    pub fn color_at(&self, p: &Vec3) -> [f64; 3] {
        let azimuth = p.x.atan2(p.z);
        let height = (p.y / self.radius).clamp(-1.0, 1.0);
        [
            0.5 + 0.4 * (2.0 * azimuth).sin(),
            0.5 + 0.4 * (3.0 * height).cos() * azimuth.cos(),
            0.5 + 0.35 * (azimuth + 2.0 * height).cos(),
        ]
    }

    /// Signed distance to the sphere surface (negative inside).
    pub fn sdf(&self, p: &Vec3) -> f64 {
        p.norm() - self.radius
    }
}

impl RadianceField for TexturedSphere {
    fn bound(&self) -> f64 {
        self.bound
    }

    fn query(&self, positions: &[Vec3]) -> Result<FieldSamples> {
        Ok(FieldSamples {
            density: positions
                .iter()
                .map(|p| self.density * crate::math::sigmoid(-self.sdf(p) / self.softness))
                .collect(),
            color: positions.iter().map(|p| self.color_at(p)).collect(),
        })
    }

    fn density_gradients(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        Ok(positions
            .iter()
            .map(|p| {
                let r = p.norm();
                if r == 0.0 {
                    return Vec3::zeros();
                }
                let s = crate::math::sigmoid(-self.sdf(p) / self.softness);
                p / r * (-self.density * s * (1.0 - s) / self.softness)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gaussian_is_one_at_origin() {
        let s = GaussianDensity::unit().query(&[Vec3::zeros()]).unwrap();
        assert_eq!(s.density[0], 1.0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let fields: Vec<Box<dyn RadianceField>> =
            vec![Box::new(GaussianDensity::unit()), Box::new(TexturedSphere { softness: 0.1, ..Default::default() })];
        let p = Vec3::new(0.3, -0.2, 0.25);
        let h = 1e-6;
        for field in fields {
            let g = field.density_gradients(&[p]).unwrap()[0];
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let d = field.query(&[p + e, p - e]).unwrap().density;
                let fd = (d[0] - d[1]) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
