use ndarray::Array3;

use super::conditions::ConditionSet;
use super::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Map between render space and the space a backend denoises in.
pub trait Codec {
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>>;

    /// Pulls a guidance-space gradient back to render space at `image`.
    fn encode_vjp(&self, image: &Array3<f64>, grad: &Array3<f64>) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(image.clone())
    }

    fn encode_vjp(&self, _image: &Array3<f64>, grad: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(grad.clone())
    }
}

/// An epsilon-prediction model over a noise schedule.
pub trait GuidanceBackend {
    fn name(&self) -> &str;

    fn schedule(&self) -> &NoiseSchedule;

    fn codec(&self) -> &dyn Codec;

    /// Predicted noise, same shape as `noisy`. Deterministic in its inputs.
    fn predict_noise(&mut self, noisy: &Array3<f64>, t: usize, cond: &ConditionSet) -> Result<Array3<f64>>;
}

/// The model behind a [`ConditionedBackend`]: a pretrained network adapter
/// or an analytic stand-in.
pub trait NoisePredictor {
    fn predict(
        &mut self,
        noisy: &Array3<f64>,
        t: usize,
        alpha_bar: f64,
        cond: &ConditionSet,
        guidance_scale: f64,
    ) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    /// Image prompt plus rendered depth, a 2D diffusion prior.
    ImagePromptDepth,
    /// Image prompt plus relative camera pose, a view-conditioned prior.
    PoseConditioned,
}

impl BackendKind {
    pub fn default_guidance_scale(self) -> f64 {
        match self {
            BackendKind::ImagePromptDepth => 100.0,
            BackendKind::PoseConditioned => 5.0,
        }
    }

    fn check(self, backend: &str, cond: &ConditionSet) -> Result<()> {
        let missing = |condition| Error::MissingCondition {
            backend: backend.to_string(),
            condition,
        };
        if cond.image_prompt.is_none() {
            return Err(missing("image_prompt"));
        }
        match self {
            BackendKind::ImagePromptDepth if cond.depth_map.is_none() => Err(missing("depth_map")),
            BackendKind::PoseConditioned if cond.camera_delta.is_none() => Err(missing("camera_delta")),
            _ => cond.validate(),
        }
    }
}

/// Checks the conditions a backend kind requires, then defers to a predictor.
pub struct ConditionedBackend {
    name: String,
    kind: BackendKind,
    schedule: NoiseSchedule,
    codec: Box<dyn Codec>,
    predictor: Box<dyn NoisePredictor>,
    guidance_scale: f64,
}

impl ConditionedBackend {
    pub fn new(
        name: impl Into<String>,
        kind: BackendKind,
        schedule: NoiseSchedule,
        predictor: Box<dyn NoisePredictor>,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            schedule,
            codec: Box::new(IdentityCodec),
            predictor,
            guidance_scale: kind.default_guidance_scale(),
        }
    }

    pub fn with_codec(mut self, codec: Box<dyn Codec>) -> Self {
        self.codec = codec;
        self
    }

    pub fn with_guidance_scale(mut self, scale: f64) -> Self {
        self.guidance_scale = scale;
        self
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }
}

impl GuidanceBackend for ConditionedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn codec(&self) -> &dyn Codec {
        self.codec.as_ref()
    }

    fn predict_noise(&mut self, noisy: &Array3<f64>, t: usize, cond: &ConditionSet) -> Result<Array3<f64>> {
        self.schedule.check_step(t)?;
        self.kind.check(&self.name, cond)?;
        let alpha_bar = self.schedule.alpha_bar(t);
        let out = self
            .predictor
            .predict(noisy, t, alpha_bar, cond, self.guidance_scale)?;
        if out.shape() != noisy.shape() {
            return Err(Error::ShapeMismatch(format!(
                "backend `{}` returned {:?} for input {:?}",
                self.name,
                out.shape(),
                noisy.shape()
            )));
        }
        Ok(out)
    }
}
