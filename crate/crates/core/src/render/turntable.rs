use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraPose, RenderOutput};
use crate::io::images::save_rgb_png;
use crate::{Error, Result};

/// `frames` poses at azimuths `360 k / frames`, sharing elevation, radius and fov.
pub fn turntable_poses(frames: usize, elevation_deg: f64, radius: f64, fov_y_deg: f64) -> Result<Vec<CameraPose>> {
    if frames < 2 {
        return Err(Error::invalid("a turntable needs at least two frames"));
    }
    (0..frames)
        .map(|k| {
            let pose = CameraPose::new(360.0 * k as f64 / frames as f64, elevation_deg, radius, fov_y_deg);
            pose.validate().map(|_| pose)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurntableFrame {
    pub index: usize,
    pub file: String,
    pub pose: CameraPose,
}

/// Writes `frame_####.png` for every view plus a `poses.json` manifest.
pub fn export_turntable(dir: &Path, poses: &[CameraPose], frames: &[RenderOutput]) -> Result<Vec<TurntableFrame>> {
    if poses.len() != frames.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} poses for {} frames",
            poses.len(),
            frames.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(frames.len());
    for (index, (pose, frame)) in poses.iter().zip(frames).enumerate() {
        let file = format!("frame_{index:04}.png");
        save_rgb_png(&dir.join(&file), &frame.image)?;
        manifest.push(TurntableFrame {
            index,
            file,
            pose: *pose,
        });
    }
    let path = dir.join("poses.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
