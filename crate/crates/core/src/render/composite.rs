//! Front-to-back alpha compositing shared by the volume and mesh renderers.
//!
//! Weights are `w_k = alpha_k * prod_{i<k} (1 - alpha_i)`, and the pixel
//! value is `sum_k w_k y_k + T y_bg` with `T = prod_k (1 - alpha_k)`.

use crate::math::normalize_vjp;
use crate::Vec3;

/// Opacity below which depth is reported as 0.
pub const DEPTH_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub alpha: f64,
    pub t: f64,
    pub color: [f64; 3],
    pub normal: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub opacity: f64,
    pub transmittance: f64,
    pub depth_sum: f64,
    pub normal_sum: Vec3,
}

impl Composite {
    pub fn depth(&self) -> f64 {
        if self.opacity < DEPTH_EPSILON {
            0.0
        } else {
            self.depth_sum / self.opacity
        }
    }

    /// Renormalized normal, or zero where the pixel is not covered.
    pub fn normal(&self, threshold: f64) -> Vec3 {
        if self.opacity > threshold && self.normal_sum.norm() > 1e-12 {
            self.normal_sum.normalize()
        } else {
            Vec3::zeros()
        }
    }
}

/// Cotangents on the pixel outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelGrad {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub normal: [f64; 3],
}

/// Cotangents on one fragment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FragmentGrad {
    pub alpha: f64,
    pub color: [f64; 3],
    pub normal: Vec3,
}

/// Fragments must be sorted front to back.
pub fn composite(fragments: &[Fragment], background: [f64; 3]) -> Composite {
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth_sum = 0.0;
    let mut normal_sum = Vec3::zeros();
    for f in fragments {
        let w = transmittance * f.alpha;
        for c in 0..3 {
            color[c] += w * f.color[c];
        }
        opacity += w;
        depth_sum += w * f.t;
        normal_sum += f.normal * w;
        transmittance *= 1.0 - f.alpha;
    }
    for c in 0..3 {
        color[c] += transmittance * background[c];
    }
    Composite {
        color,
        opacity,
        transmittance,
        depth_sum,
        normal_sum,
    }
}

/// Backward of [`composite`] followed by the depth normalization and the
/// normal renormalization applied when forming a [`RenderOutput`](super::RenderOutput).
pub fn composite_backward(
    fragments: &[Fragment],
    background: [f64; 3],
    out: &Composite,
    normal_threshold: f64,
    grad: &PixelGrad,
    fragment_grads: &mut Vec<FragmentGrad>,
) {
    fragment_grads.clear();
    if fragments.is_empty() {
        return;
    }
    let mut g_opacity = grad.opacity;
    let mut g_depth_sum = 0.0;
    if out.opacity >= DEPTH_EPSILON && grad.depth != 0.0 {
        g_depth_sum = grad.depth / out.opacity;
        g_opacity -= grad.depth * out.depth() / out.opacity;
    }
    let g_normal_sum = if out.opacity > normal_threshold && out.normal_sum.norm() > 1e-12 {
        normalize_vjp(&out.normal_sum, &Vec3::from(grad.normal))
    } else {
        Vec3::zeros()
    };
    let g_color = grad.color;
    let dot3 = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];

    // Transmittance in front of each fragment.
    let mut trans = Vec::with_capacity(fragments.len());
    let mut t = 1.0;
    for f in fragments {
        trans.push(t);
        t *= 1.0 - f.alpha;
    }
    fragment_grads.resize(
        fragments.len(),
        FragmentGrad {
            alpha: 0.0,
            color: [0.0; 3],
            normal: Vec3::zeros(),
        },
    );
    // `behind` is the composite of everything after fragment k, background included.
    let mut behind = dot3(&g_color, &background);
    for k in (0..fragments.len()).rev() {
        let f = &fragments[k];
        let e = dot3(&g_color, &f.color) + g_opacity + g_depth_sum * f.t + g_normal_sum.dot(&f.normal);
        let w = trans[k] * f.alpha;
        fragment_grads[k] = FragmentGrad {
            alpha: trans[k] * (e - behind),
            color: [w * g_color[0], w * g_color[1], w * g_color[2]],
            normal: g_normal_sum * w,
        };
        behind = f.alpha * e + (1.0 - f.alpha) * behind;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frags() -> Vec<Fragment> {
        vec![
            Fragment { alpha: 0.3, t: 1.0, color: [0.9, 0.1, 0.2], normal: Vec3::new(0.0, 0.0, 1.0) },
            Fragment { alpha: 0.6, t: 1.4, color: [0.2, 0.7, 0.3], normal: Vec3::new(0.6, 0.0, 0.8) },
            Fragment { alpha: 0.45, t: 2.1, color: [0.4, 0.4, 0.9], normal: Vec3::new(0.0, 1.0, 0.0) },
        ]
    }

    fn scalar(fr: &[Fragment], bg: [f64; 3], g: &PixelGrad) -> f64 {
        let out = composite(fr, bg);
        let n = out.normal(0.1);
        (0..3).map(|c| g.color[c] * out.color[c] + g.normal[c] * n[c]).sum::<f64>()
            + g.opacity * out.opacity
            + g.depth * out.depth()
    }

    #[test]
    fn weights_sum_to_one_minus_transmittance() {
        let out = composite(&frags(), [1.0; 3]);
        assert!((out.opacity + out.transmittance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let bg = [0.3, 0.5, 0.7];
        let g = PixelGrad { color: [0.5, -1.0, 0.25], opacity: 0.7, depth: -0.4, normal: [0.3, 0.2, -0.5] };
        let fr = frags();
        let out = composite(&fr, bg);
        let mut grads = Vec::new();
        composite_backward(&fr, bg, &out, 0.1, &g, &mut grads);
        let h = 1e-7;
        for k in 0..fr.len() {
            let mut p = fr.clone();
            p[k].alpha += h;
            let mut m = fr.clone();
            m[k].alpha -= h;
            let fd = (scalar(&p, bg, &g) - scalar(&m, bg, &g)) / (2.0 * h);
            assert!((fd - grads[k].alpha).abs() < 1e-6, "alpha {k}: {fd} vs {}", grads[k].alpha);
            for c in 0..3 {
                let mut p = fr.clone();
                p[k].color[c] += h;
                let mut m = fr.clone();
                m[k].color[c] -= h;
                let fd = (scalar(&p, bg, &g) - scalar(&m, bg, &g)) / (2.0 * h);
                assert!((fd - grads[k].color[c]).abs() < 1e-6);
                let mut p = fr.clone();
                p[k].normal[c] += h;
                let mut m = fr.clone();
                m[k].normal[c] -= h;
                let fd = (scalar(&p, bg, &g) - scalar(&m, bg, &g)) / (2.0 * h);
                assert!((fd - grads[k].normal[c]).abs() < 1e-6);
            }
        }
    }
}
