//! Loss terms over a [`RenderOutput`] and the reference data, each paired with
//! its gradient on the render.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::render::{CameraPose, RenderOutput};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ip2d: f64,
    pub lambda_3d: f64,
    pub lambda_d: f64,
    pub lambda_n: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ip2d: 1.0,
            lambda_3d: 40.0,
            lambda_d: 0.001,
            lambda_n: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ip2d, self.lambda_3d, self.lambda_d, self.lambda_n];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// The input view: image, binary foreground mask, optional monocular depth and
/// the pose it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBundle {
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
    pub pseudo_depth: Option<Array2<f64>>,
    pub pose: CameraPose,
}

impl ReferenceBundle {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 || self.mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs mask {:?}",
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if !self.mask.iter().any(|m| *m > 0.5) {
            return Err(Error::invalid("reference mask is empty"));
        }
        if let Some(d) = &self.pseudo_depth {
            if d.dim() != (h, w) {
                return Err(Error::ShapeMismatch(format!("pseudo depth {:?} vs image {h}x{w}", d.shape())));
            }
            if d.iter().zip(self.mask.iter()).any(|(v, m)| *m > 0.5 && !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "pseudo depth under the mask".into(),
                });
            }
        }
        self.pose.validate()
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }
}

fn check_dims(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecLoss {
    pub value: f64,
    pub d_image: Array3<f64>,
    pub d_opacity: Array2<f64>,
}

/// Masked color error averaged over all color elements plus mask error
/// averaged over pixels. The rendered opacity stands in for the rendered mask.
pub fn loss_rec(image: &Array3<f64>, mask: &Array2<f64>, out: &RenderOutput) -> Result<RecLoss> {
    check_dims("reference vs rendered image", image.shape(), out.image.shape())?;
    check_dims("reference mask vs rendered opacity", mask.shape(), out.opacity.shape())?;
    let n_color = image.len() as f64;
    let n_pix = mask.len() as f64;
    let mut value = 0.0;
    let mut d_image = Array3::zeros(image.raw_dim());
    for (((r, c, k), x), xr) in image.indexed_iter().zip(out.image.iter()) {
        let m = mask[[r, c]];
        let e = m * (x - xr);
        value += e * e / n_color;
        d_image[[r, c, k]] = -2.0 * m * e / n_color;
    }
    let mut d_opacity = Array2::zeros(mask.raw_dim());
    for ((idx, m), o) in mask.indexed_iter().zip(out.opacity.iter()) {
        let e = m - o;
        value += e * e / n_pix;
        d_opacity[idx] = -2.0 * e / n_pix;
    }
    Ok(RecLoss {
        value,
        d_image,
        d_opacity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    pub d_depth: Array2<f64>,
}

/// `(1 - pearson) / 2` between the pseudo depth and the rendered depth, with
/// statistics taken over pixels where the mask is set.
pub fn loss_depth(mask: &Array2<f64>, pseudo_depth: &Array2<f64>, rendered_depth: &Array2<f64>) -> Result<DepthLoss> {
    check_dims("mask vs pseudo depth", mask.shape(), pseudo_depth.shape())?;
    check_dims("mask vs rendered depth", mask.shape(), rendered_depth.shape())?;
    let idx: Vec<(usize, usize)> = mask
        .indexed_iter()
        .filter(|(_, m)| **m > 0.5)
        .map(|(i, _)| i)
        .collect();
    if idx.len() < 2 {
        return Err(Error::DegenerateDepth);
    }
    let n = idx.len() as f64;
    let mean_a = idx.iter().map(|i| pseudo_depth[*i]).sum::<f64>() / n;
    let mean_b = idx.iter().map(|i| rendered_depth[*i]).sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for i in &idx {
        let a = pseudo_depth[*i] - mean_a;
        let b = rendered_depth[*i] - mean_b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    let tiny = |s: f64, mean: f64| s <= 1e-24 * n * mean.abs().max(1.0).powi(2);
    if tiny(saa, mean_a) || tiny(sbb, mean_b) || !(saa.is_finite() && sbb.is_finite()) {
        return Err(Error::DegenerateDepth);
    }
    let norm = (saa * sbb).sqrt();
    let corr = (sab / norm).clamp(-1.0, 1.0);
    let mut d_depth = Array2::zeros(mask.raw_dim());
    for i in &idx {
        let a = pseudo_depth[*i] - mean_a;
        let b = rendered_depth[*i] - mean_b;
        let d_corr = a / norm - corr * b / sbb;
        d_depth[*i] = -0.5 * d_corr;
    }
    Ok(DepthLoss {
        value: 0.5 * (1.0 - corr),
        d_depth,
    })
}

/// Normalized Gaussian taps for an odd kernel of width `k` with `sigma = k / 6`.
pub fn gaussian_kernel(k: usize) -> Result<Vec<f64>> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::invalid(format!("blur kernel size must be odd and at least 3, got {k}")));
    }
    let sigma = k as f64 / 6.0;
    let r = (k / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// One separable pass along `axis` with edge-replicate padding, written as a
/// weighted sum of differences so constant signals are reproduced exactly.
fn blur_axis(src: &Array3<f64>, taps: &[f64], axis: usize) -> Array3<f64> {
    let r = (taps.len() / 2) as isize;
    let len = src.len_of(Axis(axis)) as isize;
    let mut out = src.clone();
    for ((i, j, c), v) in out.indexed_iter_mut() {
        let pos = [i, j][axis] as isize;
        let center = src[[i, j, c]];
        let mut acc = 0.0;
        for (o, w) in (-r..=r).zip(taps) {
            let q = (pos + o).clamp(0, len - 1) as usize;
            let sample = if axis == 0 { src[[q, j, c]] } else { src[[i, q, c]] };
            acc += w * (sample - center);
        }
        *v = center + acc;
    }
    out
}

/// Separable Gaussian blur of an `(H, W, C)` map.
pub fn gaussian_blur(map: &Array3<f64>, k: usize) -> Result<Array3<f64>> {
    let taps = gaussian_kernel(k)?;
    Ok(blur_axis(&blur_axis(map, &taps, 0), &taps, 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalLoss {
    pub value: f64,
    pub d_normal: Array3<f64>,
}

/// Mean squared distance between the normal map and a frozen blurred copy.
pub fn loss_normal(normal_map: &Array3<f64>, k: usize) -> Result<NormalLoss> {
    let blurred = gaussian_blur(normal_map, k)?;
    let n = normal_map.len().max(1) as f64;
    let diff = normal_map - &blurred;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok(NormalLoss {
        value,
        d_normal: diff * (2.0 / n),
    })
}

/// Scalar terms entering the total. Score distillation terms carry their
/// effect through injected gradients; their reported value is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sds_2d: f64,
    pub sds_3d: f64,
    pub depth: f64,
    pub normal: f64,
    pub rec: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    let named = [
        ("sds_2d", terms.sds_2d),
        ("sds_3d", terms.sds_3d),
        ("depth", terms.depth),
        ("normal", terms.normal),
        ("rec", terms.rec),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("loss term `{name}`"),
        });
    }
    Ok(weights.lambda_ip2d * terms.sds_2d
        + weights.lambda_3d * terms.sds_3d
        + weights.lambda_d * terms.depth
        + weights.lambda_n * terms.normal
        + terms.rec)
}
