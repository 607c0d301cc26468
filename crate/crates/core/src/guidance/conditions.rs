use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::render::RenderOutput;
use crate::{Error, Result};

/// Pose of a view relative to the reference view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraDelta {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

/// Conditions handed to a noise predictor alongside the noisy view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionSet {
    pub image_prompt: Option<Array3<f64>>,
    /// Normalized depth in `[0, 1]`.
    pub depth_map: Option<Array2<f64>>,
    pub camera_delta: Option<CameraDelta>,
    pub text: Option<String>,
    /// Precomputed maps keyed by kind (`scribble`, `pose`, `canny`, ...).
    pub control_maps: BTreeMap<String, Array2<f64>>,
}

impl ConditionSet {
    pub fn validate(&self) -> Result<()> {
        if self.image_prompt.is_none()
            && self.depth_map.is_none()
            && self.camera_delta.is_none()
            && self.text.is_none()
            && self.control_maps.is_empty()
        {
            return Err(Error::invalid("condition set is empty"));
        }
        if let Some(d) = &self.depth_map {
            if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("depth condition must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Rendered depth as a guidance condition: min-max normalized over pixels
/// with opacity above `threshold`, nearest surface at 1, background at 0.
pub fn depth_condition(render: &RenderOutput, threshold: f64) -> Array2<f64> {
    let covered = |r: usize, c: usize| render.opacity[[r, c]] > threshold;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ((r, c), &d) in render.depth.indexed_iter() {
        if covered(r, c) {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let span = hi - lo;
    Array2::from_shape_fn(render.depth.raw_dim(), |(r, c)| {
        if !covered(r, c) {
            0.0
        } else if span > 1e-12 {
            1.0 - (render.depth[[r, c]] - lo) / span
        } else {
            1.0
        }
    })
}
