use std::ops::Range;

use rand::Rng;

use super::composite::{composite, composite_backward, Composite, Fragment, FragmentGrad};
use super::{RenderGrad, RenderOutput, RenderSettings, Rays};
use crate::field::{FieldGrad, FieldSamples, FieldTape, RadianceField, VolumeField, NORMAL_EPSILON};
use crate::math::normalize_vjp;
use crate::{Error, Result, Vec3};

const CHUNK: usize = 16_384;

/// Samples along all rays, flattened in ray order.
#[derive(Debug, Clone, Default)]
struct RaySamples {
    positions: Vec<Vec3>,
    t: Vec<f64>,
    delta: Vec<f64>,
    ranges: Vec<Range<usize>>,
}

/// Entry and exit distances of a ray through the cube `[-bound, bound]^3`.
fn intersect_box(origin: &Vec3, dir: &Vec3, bound: f64) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a].abs() > bound {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (lo, hi) = {
            let u = (-bound - origin[a]) * inv;
            let v = (bound - origin[a]) * inv;
            if u < v { (u, v) } else { (v, u) }
        };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 < t1).then_some((t0, t1))
}

fn sample_rays<R: Rng + ?Sized>(rays: &Rays, bound: f64, settings: &RenderSettings, rng: &mut R) -> Result<RaySamples> {
    if !(settings.near < settings.far) {
        return Err(Error::invalid(format!(
            "near {} must be smaller than far {}",
            settings.near, settings.far
        )));
    }
    if settings.samples_per_ray < 2 {
        return Err(Error::invalid("samples_per_ray must be at least 2"));
    }
    let n = settings.samples_per_ray;
    let mut out = RaySamples::default();
    for (o, d) in rays.origins.iter().zip(&rays.directions) {
        let start = out.positions.len();
        if let Some((enter, exit)) = intersect_box(o, d, bound) {
            let near = enter.max(settings.near);
            let far = exit.min(settings.far);
            if near < far {
                let step = (far - near) / n as f64;
                for i in 0..n {
                    let jitter = if settings.stratified { rng.random::<f64>() } else { 0.5 };
                    let t = near + (i as f64 + jitter) * step;
                    let p = (o + d * t).map(|v| v.clamp(-bound, bound));
                    out.positions.push(p);
                    out.t.push(t);
                    out.delta.push(step);
                }
            }
        }
        out.ranges.push(start..out.positions.len());
    }
    Ok(out)
}

fn alphas(samples: &RaySamples, density: &[f64]) -> Result<Vec<f64>> {
    density
        .iter()
        .zip(&samples.delta)
        .enumerate()
        .map(|(i, (&sigma, &delta))| {
            if !sigma.is_finite() {
                let p = samples.positions[i];
                return Err(Error::NonFinite {
                    what: format!("density at sample position [{}, {}, {}]", p.x, p.y, p.z),
                });
            }
            Ok(1.0 - (-sigma * delta).exp())
        })
        .collect()
}

/// Indices of samples whose rendering weight reaches `cutoff`.
fn significant_samples(samples: &RaySamples, alpha: &[f64], cutoff: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for range in &samples.ranges {
        let mut trans = 1.0;
        for i in range.clone() {
            if trans * alpha[i] >= cutoff {
                out.push(i);
            }
            trans *= 1.0 - alpha[i];
        }
    }
    out
}

fn fragments_for(range: &Range<usize>, samples: &RaySamples, alpha: &[f64], field: &FieldSamples, normals: &[Vec3], out: &mut Vec<Fragment>) {
    out.clear();
    out.extend(range.clone().map(|i| Fragment {
        alpha: alpha[i],
        t: samples.t[i],
        color: field.color[i],
        normal: normals[i],
    }));
}

fn normals_from_gradients(grads: &[Vec3]) -> Vec<Vec3> {
    grads
        .iter()
        .map(|g| {
            let norm = g.norm();
            if norm < NORMAL_EPSILON {
                Vec3::zeros()
            } else {
                -g / norm
            }
        })
        .collect()
}

fn assemble(
    rays: &Rays,
    samples: &RaySamples,
    alpha: &[f64],
    field: &FieldSamples,
    normals: &[Vec3],
    background: [f64; 3],
    settings: &RenderSettings,
) -> (RenderOutput, Vec<Composite>) {
    let mut output = RenderOutput::blank(rays.height, rays.width, background);
    let mut composites = Vec::with_capacity(rays.len());
    let mut frags = Vec::new();
    for (r, range) in samples.ranges.iter().enumerate() {
        fragments_for(range, samples, alpha, field, normals, &mut frags);
        let px = composite(&frags, background);
        output.write_pixel(r / rays.width, r % rays.width, &px, settings.normal_threshold);
        composites.push(px);
    }
    (output, composites)
}

/// Volume-renders any field. Normals come from the field's density
/// gradient at samples with non-negligible weight.
pub fn render<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    rays: &Rays,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<RenderOutput> {
    let background = settings.background.resolve(rng);
    let samples = sample_rays(rays, field.bound(), settings, rng)?;
    let mut values = FieldSamples::default();
    for chunk in samples.positions.chunks(CHUNK) {
        let s = field.query(chunk)?;
        values.density.extend(s.density);
        values.color.extend(s.color);
    }
    let alpha = alphas(&samples, &values.density)?;
    let mut normals = vec![Vec3::zeros(); samples.positions.len()];
    if settings.compute_normals {
        let idx = significant_samples(&samples, &alpha, settings.normal_weight_cutoff);
        let pts: Vec<Vec3> = idx.iter().map(|&i| samples.positions[i]).collect();
        let grads = field.density_gradients(&pts)?;
        for (&i, n) in idx.iter().zip(normals_from_gradients(&grads)) {
            normals[i] = n;
        }
    }
    Ok(assemble(rays, &samples, &alpha, &values, &normals, background, settings).0)
}

/// Everything [`render_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct RenderTape {
    width: usize,
    settings: RenderSettings,
    background: [f64; 3],
    samples: RaySamples,
    alpha: Vec<f64>,
    values: FieldSamples,
    normals: Vec<Vec3>,
    normal_idx: Vec<usize>,
    normal_grads: Vec<Vec3>,
    composites: Vec<Composite>,
    field_tapes: Vec<(Range<usize>, FieldTape)>,
}

impl RenderTape {
    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    pub fn sample_count(&self) -> usize {
        self.samples.positions.len()
    }
}

/// Differentiable render of a learnable field.
pub fn render_train<R: Rng + ?Sized>(
    field: &VolumeField,
    rays: &Rays,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<(RenderOutput, RenderTape)> {
    let background = settings.background.resolve(rng);
    let samples = sample_rays(rays, field.bound(), settings, rng)?;
    let mut values = FieldSamples::default();
    let mut field_tapes = Vec::new();
    let mut start = 0;
    for chunk in samples.positions.chunks(CHUNK) {
        let (s, tape) = field.query_with_tape(chunk)?;
        values.density.extend(s.density);
        values.color.extend(s.color);
        field_tapes.push((start..start + chunk.len(), tape));
        start += chunk.len();
    }
    let alpha = alphas(&samples, &values.density)?;
    let mut normals = vec![Vec3::zeros(); samples.positions.len()];
    let mut normal_idx = Vec::new();
    let mut normal_grads = Vec::new();
    if settings.compute_normals {
        normal_idx = significant_samples(&samples, &alpha, settings.normal_weight_cutoff);
        let pts: Vec<Vec3> = normal_idx.iter().map(|&i| samples.positions[i]).collect();
        normal_grads = field.density_gradients(&pts)?;
        for (&i, n) in normal_idx.iter().zip(normals_from_gradients(&normal_grads)) {
            normals[i] = n;
        }
    }
    let (output, composites) = assemble(rays, &samples, &alpha, &values, &normals, background, settings);
    let tape = RenderTape {
        width: rays.width,
        settings: settings.clone(),
        background,
        samples,
        alpha,
        values,
        normals,
        normal_idx,
        normal_grads,
        composites,
        field_tapes,
    };
    Ok((output, tape))
}

/// Backpropagates output cotangents to the field parameters.
pub fn render_backward(field: &VolumeField, tape: &RenderTape, grad: &RenderGrad) -> Result<FieldGrad> {
    let n = tape.samples.positions.len();
    let mut d_density = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    let mut d_normal = vec![Vec3::zeros(); n];
    let mut frags = Vec::new();
    let mut frag_grads: Vec<FragmentGrad> = Vec::new();
    for (r, range) in tape.samples.ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let pixel = grad.pixel(r / tape.width, r % tape.width);
        fragments_for(range, &tape.samples, &tape.alpha, &tape.values, &tape.normals, &mut frags);
        composite_backward(
            &frags,
            tape.background,
            &tape.composites[r],
            tape.settings.normal_threshold,
            &pixel,
            &mut frag_grads,
        );
        for (k, fg) in range.clone().zip(&frag_grads) {
            let a = tape.alpha[k];
            d_density[k] = fg.alpha * tape.samples.delta[k] * (1.0 - a);
            d_color[k] = fg.color;
            d_normal[k] = fg.normal;
        }
    }
    let mut out = field.zero_grad();
    for (range, ftape) in &tape.field_tapes {
        field.backward(ftape, &d_density[range.clone()], &d_color[range.clone()], &mut out, None);
    }
    let mut positions = Vec::new();
    let mut cotangents = Vec::new();
    for (&i, g) in tape.normal_idx.iter().zip(&tape.normal_grads) {
        if g.norm() < NORMAL_EPSILON || d_normal[i] == Vec3::zeros() {
            continue;
        }
        positions.push(tape.samples.positions[i]);
        cotangents.push(-normalize_vjp(g, &d_normal[i]));
    }
    field.density_gradient_backward(&positions, &cotangents, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::UniformField;
    use crate::field::{FieldConfig, HashGridConfig};
    use crate::render::{generate_rays, Background, CameraPose};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Homogeneous slab `z in [z0, z1]`, zero density elsewhere.
    struct Slab {
        sigma: f64,
        z0: f64,
        z1: f64,
    }

    impl RadianceField for Slab {
        fn bound(&self) -> f64 {
            10.0
        }
        fn query(&self, positions: &[Vec3]) -> Result<FieldSamples> {
            Ok(FieldSamples {
                density: positions
                    .iter()
                    .map(|p| if p.z >= self.z0 && p.z <= self.z1 { self.sigma } else { 0.0 })
                    .collect(),
                color: vec![[0.2, 0.4, 0.6]; positions.len()],
            })
        }
        fn density_gradients(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
            Ok(vec![Vec3::zeros(); positions.len()])
        }
    }

    fn axis_ray() -> Rays {
        Rays {
            height: 1,
            width: 1,
            origins: vec![Vec3::new(0.0, 0.0, -1.0)],
            directions: vec![Vec3::new(0.0, 0.0, 1.0)],
        }
    }

    fn slab_opacity(samples_per_ray: usize) -> f64 {
        let slab = Slab { sigma: 1.7, z0: 0.137, z1: 1.291 };
        let settings = RenderSettings {
            near: 0.0,
            far: 3.0,
            samples_per_ray,
            ..Default::default()
        };
        let out = render(&slab, &axis_ray(), &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        out.opacity[[0, 0]]
    }

    #[test]
    fn slab_opacity_matches_closed_form() {
        let expected = 1.0 - (-1.7f64 * (1.291 - 0.137)).exp();
        assert!((slab_opacity(512) - expected).abs() < 1e-3);
        assert!((slab_opacity(1024) - slab_opacity(512)).abs() < 1e-3);
    }

    #[test]
    fn empty_scene_shows_background() {
        let field = UniformField::new(0.0, [0.9, 0.1, 0.1], 1.0);
        let rays = generate_rays(&CameraPose::default(), 6, 5).unwrap();
        let settings = RenderSettings {
            background: Background::Color([0.25, 0.5, 0.75]),
            samples_per_ray: 16,
            ..Default::default()
        };
        let out = render(&field, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.opacity.iter().all(|&o| o == 0.0));
        for px in out.image.outer_iter().flat_map(|row| row.outer_iter().map(|p| p.to_vec()).collect::<Vec<_>>()) {
            assert_eq!(px, vec![0.25, 0.5, 0.75]);
        }
    }

    #[test]
    fn opaque_scene_hides_random_background() {
        let field = UniformField::new(1e6, [0.3, 0.6, 0.9], 1.0);
        let rays = generate_rays(&CameraPose::default(), 8, 8).unwrap();
        let settings = RenderSettings {
            background: Background::Random,
            samples_per_ray: 8,
            ..Default::default()
        };
        let a = render(&field, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render(&field, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // Corner rays miss the cube; compare covered pixels only.
        for r in 0..8 {
            for c in 0..8 {
                if a.opacity[[r, c]] == 1.0 {
                    for k in 0..3 {
                        assert_eq!(a.image[[r, c, k]].to_bits(), b.image[[r, c, k]].to_bits());
                    }
                }
            }
        }
        assert!(a.opacity[[4, 4]] == 1.0);
    }

    fn tiny_field() -> VolumeField {
        let config = FieldConfig {
            grid: HashGridConfig {
                levels: 3,
                features_per_level: 2,
                coarsest_resolution: 4,
                finest_resolution: 16,
                table_size_log2: 10,
                bound: 1.0,
            },
            hidden_dim: 8,
            blob_density: 4.0,
            blob_radius: 0.4,
            ..Default::default()
        };
        let mut field = VolumeField::new(config, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in field.param_groups_mut()[0].iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        field
    }

    #[test]
    fn weights_never_exceed_one() {
        let field = tiny_field();
        let rays = generate_rays(&CameraPose::new(30.0, 10.0, 2.5, 45.0), 16, 16).unwrap();
        let settings = RenderSettings { samples_per_ray: 48, stratified: true, ..Default::default() };
        let (out, tape) = render_train(&field, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for px in &tape.composites {
            assert!(px.opacity <= 1.0 + 1e-6);
        }
        assert!(out.opacity.iter().all(|o| (0.0..=1.0 + 1e-6).contains(o)));
        let plain = render(&field, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(plain, out);
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let field = tiny_field();
        let rays = generate_rays(&CameraPose::new(20.0, 15.0, 2.2, 50.0), 8, 8).unwrap();
        // Every sample contributes a normal so the objective has no cutoff jumps.
        let settings = RenderSettings { samples_per_ray: 24, normal_weight_cutoff: 0.0, ..Default::default() };
        let mut probe = RenderGrad::zeros(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        probe.image = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-1.0..1.0));
        probe.depth.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        probe.opacity.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        probe.normal_map = Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(-0.5..0.5));
        let objective = |f: &VolumeField| {
            let out = render(f, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            (&out.image * &probe.image).sum()
                + (&out.depth * &probe.depth).sum()
                + (&out.opacity * &probe.opacity).sum()
                + (&out.normal_map * &probe.normal_map).sum()
        };
        let (_, tape) = render_train(&field, &rays, &settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grad = render_backward(&field, &tape, &probe).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for (group, idx) in [(0usize, 3usize), (0, 130), (0, 600), (1, 4), (2, 7), (3, 20), (4, 1), (5, 9), (6, 0), (6, 2)] {
            let mut plus = field.clone();
            plus.param_groups_mut()[group][idx] += h;
            let mut minus = field.clone();
            minus.param_groups_mut()[group][idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grad.groups()[group][idx];
            if fd.abs() < 1e-8 && an.abs() < 1e-8 {
                continue;
            }
            checked += 1;
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(1e-4),
                "group {group}[{idx}]: fd {fd} vs analytic {an}"
            );
        }
        assert!(checked >= 6);
    }

    #[test]
    fn non_finite_density_names_position() {
        let field = UniformField::new(f64::NAN, [0.0; 3], 1.0);
        let rays = generate_rays(&CameraPose::default(), 2, 2).unwrap();
        let err = render(&field, &rays, &RenderSettings::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("sample position"));
    }

    #[test]
    fn rejects_bad_sampling_settings() {
        let field = UniformField::new(1.0, [0.0; 3], 1.0);
        let rays = axis_ray();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = RenderSettings { near: 2.0, far: 1.0, ..Default::default() };
        assert!(render(&field, &rays, &s, &mut rng).is_err());
        let s = RenderSettings { samples_per_ray: 1, ..Default::default() };
        assert!(render(&field, &rays, &s, &mut rng).is_err());
    }
}
