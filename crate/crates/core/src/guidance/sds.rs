use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::backend::GuidanceBackend;
use super::conditions::ConditionSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(t) = 1 - alpha_bar(t)`.
    OneMinusAlphaBar,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdsConfig {
    /// Timesteps are drawn uniformly from `[min_frac, max_frac] * steps`.
    pub min_frac: f64,
    pub max_frac: f64,
    pub weighting: Weighting,
    /// Multiplies `w(t)`.
    pub scale: f64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            min_frac: 0.02,
            max_frac: 0.98,
            weighting: Weighting::OneMinusAlphaBar,
            scale: 1.0,
        }
    }
}

impl SdsConfig {
    pub fn step_range(&self, steps: usize) -> Result<(usize, usize)> {
        let lo = ((self.min_frac * steps as f64).ceil() as usize).max(1);
        let hi = ((self.max_frac * steps as f64).floor() as usize).min(steps);
        if !(0.0..=1.0).contains(&self.min_frac) || lo > hi {
            return Err(Error::invalid(format!(
                "empty timestep range [{}, {}] of {steps}",
                self.min_frac, self.max_frac
            )));
        }
        Ok((lo, hi))
    }

    pub fn weight(&self, alpha_bar: f64) -> f64 {
        self.scale
            * match self.weighting {
                Weighting::OneMinusAlphaBar => 1.0 - alpha_bar,
                Weighting::Constant => 1.0,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdsSample {
    pub t: usize,
    /// Gradient on the rendered image.
    pub grad: Array3<f64>,
}

/// `weight * (predicted - eps)` at a fixed timestep and noise draw, pulled back
/// through the backend codec to render space.
pub fn sds_gradient_at(
    image: &Array3<f64>,
    backend: &mut dyn GuidanceBackend,
    cond: &ConditionSet,
    t: usize,
    eps: &Array3<f64>,
    weight: f64,
) -> Result<Array3<f64>> {
    let latent = backend.codec().encode(image)?;
    let noisy = backend.schedule().add_noise(&latent, t, eps)?;
    let predicted = backend.predict_noise(&noisy, t, cond)?;
    let mut residual = predicted - eps;
    residual *= weight;
    backend.codec().encode_vjp(image, &residual)
}

/// Draws `t` and `eps`, then evaluates [`sds_gradient_at`].
pub fn sds_gradient<R: Rng + ?Sized>(
    image: &Array3<f64>,
    backend: &mut dyn GuidanceBackend,
    cond: &ConditionSet,
    config: &SdsConfig,
    rng: &mut R,
) -> Result<SdsSample> {
    let (lo, hi) = config.step_range(backend.schedule().steps())?;
    let t = rng.random_range(lo..=hi);
    let shape = backend.codec().encode(image)?.raw_dim();
    let eps = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
    let weight = config.weight(backend.schedule().alpha_bar(t));
    let grad = sds_gradient_at(image, backend, cond, t, &eps, weight)?;
    Ok(SdsSample { t, grad })
}
