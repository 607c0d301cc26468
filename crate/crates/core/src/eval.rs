//! Turntable metrics: embedding similarity to the reference and perceptual
//! distance between adjacent views, over pluggable feature extractors.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::io::checkpoint::load_checkpoint;
use crate::render::{turntable_poses, Background, CameraPose, RenderSettings};
use crate::tet::RasterSettings;
use crate::train::TrainedModel;
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.json";

/// Maps an image `(row, col, channel)` to a global embedding and to a stack of
/// spatial feature maps. Must be deterministic.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn embed(&self, image: &Array3<f64>) -> Result<Vec<f64>>;
    fn layers(&self, image: &Array3<f64>) -> Result<Vec<Array3<f64>>>;
}

/// Fixed-seed stack of strided 3x3 convolutions with ReLU. Needs no weights
/// on disk, so it is always available.
#[derive(Debug, Clone)]
pub struct RandomProjectionExtractor {
    /// `(out, in, 3, 3)` per layer.
    kernels: Vec<Array4<f64>>,
}

impl RandomProjectionExtractor {
    pub const NAME: &'static str = "random-projection";
    pub const SEED: u64 = 0x5eed_cafe;

    pub fn new() -> Self {
        Self::with_channels(&[3, 16, 32, 32], Self::SEED)
    }

    pub fn with_channels(channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = channels
            .windows(2)
            .map(|w| {
                let std = (2.0 / (9 * w[0]) as f64).sqrt();
                Array4::from_shape_simple_fn((w[1], w[0], 3, 3), || {
                    std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
            })
            .collect();
        Self { kernels }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// Stride-2 3x3 convolution with zero padding, followed by ReLU.
fn conv_relu(x: &Array3<f64>, kernel: &Array4<f64>) -> Array3<f64> {
    let (h, w, cin) = x.dim();
    let cout = kernel.dim().0;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::zeros((ho, wo, cout));
    for r in 0..ho {
        for c in 0..wo {
            for o in 0..cout {
                let mut acc = 0.0;
                for dr in 0..3 {
                    let Some(y) = (2 * r + dr).checked_sub(1).filter(|y| *y < h) else {
                        continue;
                    };
                    for dc in 0..3 {
                        let Some(xx) = (2 * c + dc).checked_sub(1).filter(|x| *x < w) else {
                            continue;
                        };
                        for i in 0..cin {
                            acc += kernel[[o, i, dr, dc]] * x[[y, xx, i]];
                        }
                    }
                }
                out[[r, c, o]] = acc.max(0.0);
            }
        }
    }
    out
}

impl FeatureExtractor for RandomProjectionExtractor {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn embed(&self, image: &Array3<f64>) -> Result<Vec<f64>> {
        Ok(self
            .layers(image)?
            .iter()
            .flat_map(|f| {
                let (h, w, c) = f.dim();
                (0..c).map(move |k| f.slice(ndarray::s![.., .., k]).sum() / (h * w) as f64)
            })
            .collect())
    }

    fn layers(&self, image: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        if image.dim().2 != 3 || image.is_empty() {
            return Err(Error::ShapeMismatch(format!("expected an RGB image, got {:?}", image.shape())));
        }
        let mut x = image.mapv(|v| 2.0 * v - 1.0);
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            x = conv_relu(&x, k);
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Name-keyed extractors. Adapters for pretrained backbones register here.
pub struct ExtractorRegistry {
    extractors: BTreeMap<String, Box<dyn FeatureExtractor>>,
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(RandomProjectionExtractor::new()));
        reg
    }
}

impl ExtractorRegistry {
    pub fn empty() -> Self {
        Self {
            extractors: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, extractor: Box<dyn FeatureExtractor>) {
        self.extractors.insert(extractor.name().to_string(), extractor);
    }

    pub fn get(&self, name: &str) -> Option<&dyn FeatureExtractor> {
        self.extractors.get(name).map(|e| e.as_ref())
    }
}

/// `K` views at azimuths `360 i / K` and one elevation.
#[derive(Debug, Clone)]
pub struct TurntableSet {
    pub frames: Vec<Array3<f64>>,
    pub poses: Vec<CameraPose>,
}

impl TurntableSet {
    pub fn new(frames: Vec<Array3<f64>>, poses: Vec<CameraPose>) -> Result<Self> {
        let k = frames.len();
        if k < 2 || poses.len() != k {
            return Err(Error::invalid(format!(
                "turntable needs at least 2 frames with one pose each, got {k} frames and {} poses",
                poses.len()
            )));
        }
        let elevation = poses[0].elevation_deg;
        for (i, p) in poses.iter().enumerate() {
            let expected = 360.0 * i as f64 / k as f64;
            if (p.azimuth_deg - expected).abs() > 1e-9 || p.elevation_deg != elevation {
                return Err(Error::invalid(format!("pose {i} is off the evenly spaced turntable")));
            }
        }
        Ok(Self { frames, poses })
    }

    /// Frames rendered by `render` at the standard turntable poses.
    pub fn render_with(
        frames: usize,
        elevation_deg: f64,
        radius: f64,
        fov_y_deg: f64,
        mut render: impl FnMut(&CameraPose) -> Result<Array3<f64>>,
    ) -> Result<Self> {
        let poses = turntable_poses(frames, elevation_deg, radius, fov_y_deg)?;
        let images = poses.iter().map(&mut render).collect::<Result<Vec<_>>>()?;
        Self::new(images, poses)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("zero-norm embedding"));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("embedding dimensions differ".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean cosine similarity between each frame's embedding and the reference's.
pub fn clip_similarity(frames: &TurntableSet, reference: &Array3<f64>, embedder: &dyn FeatureExtractor) -> Result<f64> {
    let r = embedder.embed(reference)?;
    let mut sum = 0.0;
    for f in &frames.frames {
        sum += cosine(&embedder.embed(f)?, &r)?;
    }
    Ok(sum / frames.len() as f64)
}

/// Channel-normalized squared feature difference, averaged over pixels and
/// summed over layers.
fn feature_distance(a: &[Array3<f64>], b: &[Array3<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("extractor returned different layer counts".into()));
    }
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if fa.dim() != fb.dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature maps {:?} and {:?} differ",
                fa.shape(),
                fb.shape()
            )));
        }
        let (h, w, _) = fa.dim();
        let mut layer = 0.0;
        for r in 0..h {
            for c in 0..w {
                let va = fa.slice(ndarray::s![r, c, ..]);
                let vb = fb.slice(ndarray::s![r, c, ..]);
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                layer += va.iter().zip(vb.iter()).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>();
            }
        }
        total += layer / (h * w) as f64;
    }
    Ok(total)
}

/// Frame pairs adjacent on the cycle; two frames form a single pair.
fn cyclic_pairs(k: usize) -> Vec<(usize, usize)> {
    if k == 2 {
        vec![(0, 1)]
    } else {
        (0..k).map(|i| (i, (i + 1) % k)).collect()
    }
}

/// Mean feature distance over cyclically adjacent frames.
pub fn a_lpips(frames: &TurntableSet, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::invalid("a_lpips needs at least two frames"));
    }
    let features = frames
        .frames
        .iter()
        .map(|f| extractor.layers(f))
        .collect::<Result<Vec<_>>>()?;
    let mut distances = cyclic_pairs(frames.len())
        .into_iter()
        .map(|(i, j)| feature_distance(&features[i], &features[j]))
        .collect::<Result<Vec<_>>>()?;
    // Sorted summation keeps the result independent of frame order.
    distances.sort_by(f64::total_cmp);
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub frames: usize,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub resolution: usize,
    /// Extractors to run; names without a registered adapter are skipped.
    pub extractors: Vec<String>,
    pub render: RenderSettings,
    pub raster: RasterSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frames: 120,
            elevation_deg: 0.0,
            radius: 2.5,
            fov_y_deg: 40.0,
            resolution: 256,
            extractors: vec![
                RandomProjectionExtractor::NAME.into(),
                "clip".into(),
                "alex".into(),
                "vgg".into(),
            ],
            render: RenderSettings {
                background: Background::White,
                compute_normals: false,
                ..Default::default()
            },
            raster: RasterSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub extractor: String,
    pub clip_similarity: f64,
    pub a_lpips: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub elevation_deg: f64,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub results: Vec<MetricRecord>,
    pub skipped: Vec<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// FNV-1a of the checkpoint bytes, as hex.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Renders the checkpoint's turntable and scores it with every requested
/// extractor.
pub fn evaluate_model(
    model: &TrainedModel,
    id: &str,
    reference: &Array3<f64>,
    config: &EvalConfig,
    registry: &ExtractorRegistry,
) -> Result<MetricsReport> {
    let n = config.resolution;
    let set = TurntableSet::render_with(config.frames, config.elevation_deg, config.radius, config.fov_y_deg, |pose| {
        Ok(model.render(pose, n, n, &config.render, &config.raster)?.image)
    })?;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for name in &config.extractors {
        let Some(extractor) = registry.get(name) else {
            log::warn!("no adapter for extractor `{name}`, skipped");
            skipped.push(name.clone());
            continue;
        };
        results.push(MetricRecord {
            extractor: name.clone(),
            clip_similarity: clip_similarity(&set, reference, extractor)?,
            a_lpips: a_lpips(&set, extractor)?,
            k: config.frames,
            elevation_deg: config.elevation_deg,
            checkpoint_id: id.to_string(),
        });
    }
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(MetricsReport {
        results,
        skipped,
        timestamp,
    })
}

/// Loads a checkpoint, evaluates it and writes `metrics.json` into `output`.
pub fn evaluate(
    checkpoint: &Path,
    reference: &Array3<f64>,
    config: &EvalConfig,
    registry: &ExtractorRegistry,
    output: &Path,
) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = TrainedModel::from_checkpoint(&ckpt)?;
    let report = evaluate_model(&model, &checkpoint_id(checkpoint)?, reference, config, registry)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let path = output.join(METRICS_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
