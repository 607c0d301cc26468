//! Builds the [`ReferenceBundle`] and extra conditions from a [`RunConfig`].

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma, Rgba};
use ndarray::{Array2, Array3};

use super::config::{ConditionKind, RunConfig};
use super::images::{load_gray, load_image};
use crate::guidance::ConditionSet;
use crate::losses::ReferenceBundle;
use crate::{Error, Result};

/// Alpha or mask values above this count as foreground.
pub const MASK_THRESHOLD: f64 = 0.5;

fn binarize(map: &Array2<f64>) -> Array2<f64> {
    map.mapv(|v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Resamples color and mask to `size x size`. Color is premultiplied by the
/// mask so background never bleeds into the foreground; uncovered pixels are
/// white.
pub fn resize_masked(rgb: &Array3<f64>, mask: &Array2<f64>, size: usize) -> (Array3<f64>, Array2<f64>) {
    let (h, w, _) = rgb.dim();
    if (h, w) == (size, size) {
        return (rgb.clone(), binarize(mask));
    }
    let buf: ImageBuffer<Rgba<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let m = mask[[r, c]];
        Rgba([
            (rgb[[r, c, 0]] * m) as f32,
            (rgb[[r, c, 1]] * m) as f32,
            (rgb[[r, c, 2]] * m) as f32,
            m as f32,
        ])
    });
    let out = resize(&buf, size as u32, size as u32, FilterType::Triangle);
    let coverage = Array2::from_shape_fn((size, size), |(r, c)| out.get_pixel(c as u32, r as u32)[3] as f64);
    let color = Array3::from_shape_fn((size, size, 3), |(r, c, k)| {
        let a = coverage[[r, c]];
        if a > 1e-6 {
            (out.get_pixel(c as u32, r as u32)[k] as f64 / a).clamp(0.0, 1.0)
        } else {
            1.0
        }
    });
    (color, binarize(&coverage))
}

fn resize_map(map: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (size, size) {
        return map.clone();
    }
    // The resampler clamps float pixels to [0, 1], so work in normalized units.
    let lo = map.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([((map[[y as usize, x as usize]] - lo) / span) as f32])
    });
    let out = resize(&buf, size as u32, size as u32, FilterType::Triangle);
    Array2::from_shape_fn((size, size), |(r, c)| lo + span * out.get_pixel(c as u32, r as u32)[0] as f64)
}

/// Depth from a `.npy` float grid or any grayscale image (16-bit PNG keeps
/// its precision). Affine scale does not matter to the depth loss.
pub fn load_depth(path: &Path) -> Result<Array2<f64>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy")) {
        let as_f64: std::result::Result<Array2<f64>, _> = ndarray_npy::read_npy(path);
        match as_f64 {
            Ok(a) => Ok(a),
            Err(_) => {
                let a: Array2<f32> = ndarray_npy::read_npy(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Ok(a.mapv(f64::from))
            }
        }
    } else {
        load_gray(path)
    }
}

/// Loads the reference view at the training resolution.
pub fn load_reference(config: &RunConfig) -> Result<ReferenceBundle> {
    let loaded = load_image(&config.image)?;
    let (h, w, _) = loaded.rgb.dim();
    let mask = match (&config.mask, &loaded.alpha) {
        (Some(path), _) => {
            let m = load_gray(path)?;
            if m.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "mask {} is {}x{}, image is {h}x{w}",
                    path.display(),
                    m.dim().0,
                    m.dim().1
                )));
            }
            binarize(&m)
        }
        (None, Some(alpha)) => binarize(alpha),
        (None, None) => return Err(Error::MaskRequired),
    };
    let size = config.train.resolution;
    let (image, mask) = resize_masked(&loaded.rgb, &mask, size);
    let pseudo_depth = match &config.pseudo_depth {
        None => None,
        Some(path) if !path.exists() => {
            log::warn!("pseudo depth {} not found; depth loss disabled", path.display());
            None
        }
        Some(path) => {
            let d = load_depth(path)?;
            if d.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "pseudo depth {} is {:?}, image is {h}x{w}",
                    path.display(),
                    d.dim()
                )));
            }
            Some(resize_map(&d, size))
        }
    };
    let bundle = ReferenceBundle {
        image,
        mask,
        pseudo_depth,
        pose: config.reference_pose,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Precomputed condition maps at the training resolution, keyed by kind, and
/// the text prompt if one was given.
pub fn load_conditions(config: &RunConfig) -> Result<ConditionSet> {
    let size = config.train.resolution;
    let mut control_maps = BTreeMap::new();
    let mut text = None;
    for c in &config.conditions {
        match c.kind {
            ConditionKind::Text => {
                let t = std::fs::read_to_string(&c.path).map_err(|e| Error::io(&c.path, e))?;
                text = Some(t.trim().to_string());
            }
            kind => {
                let key = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
                control_maps.insert(key, resize_map(&load_gray(&c.path)?, size));
            }
        }
    }
    Ok(ConditionSet {
        control_maps,
        text,
        ..Default::default()
    })
}
