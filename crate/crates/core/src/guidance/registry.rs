use std::collections::BTreeMap;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backend::{BackendKind, ConditionedBackend, GuidanceBackend};
use super::oracle::{GaussianPosterior, PoseTargetOracle};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::field::analytic::TexturedSphere;
use crate::render::{generate_rays, Background, render, CameraPose, RenderSettings};
use crate::{Error, Result};

/// Everything a factory may need to build a backend for one run.
#[derive(Debug, Clone)]
pub struct BackendContext {
    pub schedule: ScheduleConfig,
    pub reference_image: Array3<f64>,
    pub reference_pose: CameraPose,
    pub height: usize,
    pub width: usize,
    /// Settings used when a backend renders its own targets.
    pub render: RenderSettings,
    pub options: serde_json::Value,
}

pub type BackendFactory = Box<dyn Fn(&BackendContext, BackendKind) -> Result<Box<dyn GuidanceBackend>>>;

/// Name-keyed backend factories. Real-model adapters register themselves
/// here; the defaults are analytic stand-ins.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register("reference-oracle", Box::new(reference_oracle));
        reg.register("synthetic-sphere-oracle", Box::new(sphere_oracle));
        reg
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, factory: BackendFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, ctx: &BackendContext, kind: BackendKind) -> Result<Box<dyn GuidanceBackend>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownBackend {
            name: name.to_string(),
            registered: self.names(),
        })?;
        factory(ctx, kind)
    }
}

fn option_f64(ctx: &BackendContext, key: &str, default: f64) -> f64 {
    ctx.options.get(key).and_then(|v| v.as_f64()).unwrap_or(default)
}

/// Point mass at the reference image for every view.
fn reference_oracle(ctx: &BackendContext, kind: BackendKind) -> Result<Box<dyn GuidanceBackend>> {
    let schedule = NoiseSchedule::new(&ctx.schedule)?;
    let posterior = GaussianPosterior::new(ctx.reference_image.clone(), option_f64(ctx, "spread", 0.0));
    Ok(Box::new(ConditionedBackend::new(
        format!("reference-oracle/{kind:?}"),
        kind,
        schedule,
        Box::new(posterior),
    )))
}

/// Point mass at a render of the textured sphere from the queried pose.
fn sphere_oracle(ctx: &BackendContext, kind: BackendKind) -> Result<Box<dyn GuidanceBackend>> {
    let schedule = NoiseSchedule::new(&ctx.schedule)?;
    let sphere = TexturedSphere::default();
    let (height, width) = (ctx.height, ctx.width);
    let settings = RenderSettings {
        compute_normals: false,
        stratified: false,
        background: match ctx.render.background {
            Background::Random => Background::White,
            other => other,
        },
        ..ctx.render.clone()
    };
    let target = Box::new(move |pose: &CameraPose| {
        let rays = generate_rays(pose, height, width)?;
        // Deterministic settings never draw from this generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(render(&sphere, &rays, &settings, &mut rng)?.image)
    });
    let oracle = PoseTargetOracle::new(ctx.reference_pose, option_f64(ctx, "spread", 0.0), target);
    Ok(Box::new(ConditionedBackend::new(
        format!("synthetic-sphere-oracle/{kind:?}"),
        kind,
        schedule,
        Box::new(oracle),
    )))
}
