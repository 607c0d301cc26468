//! Soft rasterization of triangle meshes into the same [`RenderOutput`] the
//! volume renderer produces.
//!
//! Front-facing triangles are the only fragments. Coverage is hard across
//! edges shared by two front faces and soft across silhouette edges, where it
//! is `sigmoid(d |d| / temperature)` for the signed distance `d` to the edge,
//! measured in units of the vertical image extent. Fragments are composited
//! front to back by ray distance.

use std::collections::HashMap;

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::ordered;
use super::marching::TriangleMesh;
use crate::field::{FieldGrad, FieldTape, RadianceField, VolumeField};
use crate::math::{normalize_vjp, sigmoid};
use crate::render::composite::{composite, composite_backward, Composite, Fragment, FragmentGrad, DEPTH_EPSILON};
use crate::render::{Background, CameraPose, RenderGrad, RenderOutput};
use crate::{Result, Vec3};

/// Coverage below this is dropped.
const MIN_COVERAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterSettings {
    /// Softness of silhouette coverage, relative to the squared image extent.
    pub temperature: f64,
    pub background: Background,
    pub normal_threshold: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            temperature: 1e-4,
            background: Background::White,
            normal_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct FragGeom {
    tri: u32,
    /// Edge setting the coverage, if any.
    edge: Option<u8>,
    /// Signed edge distance in extent units, for the coverage gradient.
    dist: f64,
    alpha: f64,
    t: f64,
    dir: Vec3,
    slope: [f64; 2],
}

struct View {
    eye: Vec3,
    rotation: Matrix3<f64>,
    extent: f64,
    camera: Vec<Vec3>,
    screen: Vec<[f64; 2]>,
}

impl View {
    fn new(mesh: &TriangleMesh, pose: &CameraPose) -> Self {
        let eye = pose.eye();
        let rotation = pose.rotation();
        let camera: Vec<Vec3> = mesh.positions.iter().map(|v| rotation.transpose() * (v - eye)).collect();
        let screen = camera.iter().map(|q| [-q.x / q.z, -q.y / q.z]).collect();
        Self {
            eye,
            rotation,
            extent: 2.0 * pose.tan_half_fov(),
            camera,
            screen,
        }
    }
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn coverage(dist: f64, temperature: f64) -> f64 {
    sigmoid(dist * dist.abs() / temperature)
}

fn face_normal(mesh: &TriangleMesh, tri: &[u32; 3]) -> Vec3 {
    let p = |i: usize| mesh.positions[tri[i] as usize];
    (p(1) - p(0)).cross(&(p(2) - p(0)))
}

/// Per triangle: front-facing flag and which of its edges are silhouettes.
fn classify(mesh: &TriangleMesh, eye: &Vec3) -> (Vec<bool>, Vec<[bool; 3]>) {
    let front: Vec<bool> = mesh
        .triangles
        .iter()
        .map(|t| face_normal(mesh, t).dot(&(eye - mesh.positions[t[0] as usize])) > 0.0)
        .collect();
    let mut faces: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for (f, t) in mesh.triangles.iter().enumerate() {
        for e in 0..3 {
            faces.entry(ordered(t[e], t[(e + 1) % 3])).or_default().push(f as u32);
        }
    }
    let silhouette = mesh
        .triangles
        .iter()
        .enumerate()
        .map(|(f, t)| {
            let mut s = [true; 3];
            for e in 0..3 {
                let adj = &faces[&ordered(t[e], t[(e + 1) % 3])];
                if adj.len() == 2 {
                    let other = if adj[0] as usize == f { adj[1] } else { adj[0] };
                    s[e] = front[other as usize] != front[f];
                }
            }
            s
        })
        .collect();
    (front, silhouette)
}

/// Fragments per pixel, each list sorted front to back.
fn rasterize(mesh: &TriangleMesh, pose: &CameraPose, height: usize, width: usize, temperature: f64) -> (View, Vec<Vec<FragGeom>>) {
    let view = View::new(mesh, pose);
    let mut pixels: Vec<Vec<FragGeom>> = vec![Vec::new(); height * width];
    let (front, silhouette) = classify(mesh, &view.eye);
    let tan = pose.tan_half_fov();
    let aspect = width as f64 / height as f64;
    let margin = (14.0 * temperature).sqrt() * view.extent;
    let col_of = |x: f64| ((x / (tan * aspect)) + 1.0) * 0.5 * width as f64 - 0.5;
    let row_of = |y: f64| (1.0 - y / tan) * 0.5 * height as f64 - 0.5;

    for (f, tri) in mesh.triangles.iter().enumerate() {
        if !front[f] || tri.iter().any(|&i| view.camera[i as usize].z > -1e-9) {
            continue;
        }
        let s = [
            view.screen[tri[0] as usize],
            view.screen[tri[1] as usize],
            view.screen[tri[2] as usize],
        ];
        let area = cross2(sub2(s[1], s[0]), sub2(s[2], s[0]));
        if area.abs() < 1e-18 {
            continue;
        }
        let orient = area.signum();
        let lens: Vec<f64> = (0..3).map(|e| {
            let d = sub2(s[(e + 1) % 3], s[e]);
            (d[0] * d[0] + d[1] * d[1]).sqrt()
        }).collect();
        let xs = s.iter().map(|p| p[0]);
        let ys = s.iter().map(|p| p[1]);
        let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min) - margin, xs.fold(f64::NEG_INFINITY, f64::max) + margin);
        let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min) - margin, ys.fold(f64::NEG_INFINITY, f64::max) + margin);
        let c_lo = col_of(x0).ceil().max(0.0) as usize;
        let c_hi = col_of(x1).floor().min(width as f64 - 1.0);
        let r_lo = row_of(y1).ceil().max(0.0) as usize;
        let r_hi = row_of(y0).floor().min(height as f64 - 1.0);
        if c_hi < 0.0 || r_hi < 0.0 {
            continue;
        }
        let normal = face_normal(mesh, tri);
        let v0 = mesh.positions[tri[0] as usize];
        let num = normal.dot(&(v0 - view.eye));
        for row in r_lo..=r_hi as usize {
            for col in c_lo..=c_hi as usize {
                let p = {
                    let (x, y) = pose.pixel_slope(row, col, height, width);
                    [x, y]
                };
                let mut d = [0.0; 3];
                for e in 0..3 {
                    d[e] = orient * cross2(sub2(s[(e + 1) % 3], s[e]), sub2(p, s[e])) / lens[e] / view.extent;
                }
                let inside = d.iter().all(|v| *v >= 0.0);
                if !inside && (0..3).any(|e| !silhouette[f][e] && d[e] < 0.0) {
                    continue;
                }
                let edge = (0..3)
                    .filter(|&e| silhouette[f][e])
                    .min_by(|&a, &b| d[a].total_cmp(&d[b]));
                let (alpha, dist) = match edge {
                    Some(e) => (coverage(d[e], temperature), d[e]),
                    None => (1.0, 0.0),
                };
                if alpha < MIN_COVERAGE {
                    continue;
                }
                let dir = (view.rotation * Vec3::new(p[0], p[1], -1.0)).normalize();
                let den = normal.dot(&dir);
                if den.abs() < 1e-15 {
                    continue;
                }
                let t = num / den;
                if !(t > 0.0) {
                    continue;
                }
                pixels[row * width + col].push(FragGeom {
                    tri: f as u32,
                    edge: edge.map(|e| e as u8),
                    dist,
                    alpha,
                    t,
                    dir,
                    slope: p,
                });
            }
        }
    }
    for frags in &mut pixels {
        frags.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    (view, pixels)
}

fn clamp_into(p: &Vec3, bound: f64) -> (Vec3, [bool; 3]) {
    let lim = bound * (1.0 - 1e-9);
    let mut clamped = [false; 3];
    let mut q = *p;
    for a in 0..3 {
        if q[a].abs() > lim {
            q[a] = q[a].clamp(-lim, lim);
            clamped[a] = true;
        }
    }
    (q, clamped)
}

fn sample_points(pixels: &[Vec<FragGeom>], eye: &Vec3, bound: f64) -> (Vec<Vec3>, Vec<[bool; 3]>) {
    pixels
        .iter()
        .flatten()
        .map(|g| clamp_into(&(eye + g.dir * g.t), bound))
        .unzip()
}

fn assemble(
    mesh: &TriangleMesh,
    pixels: &[Vec<FragGeom>],
    colors: &[[f64; 3]],
    height: usize,
    width: usize,
    background: [f64; 3],
    normal_threshold: f64,
) -> (RenderOutput, Vec<Composite>) {
    let mut out = RenderOutput::blank(height, width, background);
    let mut composites = Vec::with_capacity(pixels.len());
    let mut frags = Vec::new();
    let mut k = 0;
    for (i, geoms) in pixels.iter().enumerate() {
        frags.clear();
        for g in geoms {
            frags.push(Fragment {
                alpha: g.alpha,
                t: g.t,
                color: colors[k],
                normal: face_normal(mesh, &mesh.triangles[g.tri as usize]).normalize(),
            });
            k += 1;
        }
        let px = composite(&frags, background);
        out.write_pixel(i / width, i % width, &px, normal_threshold);
        composites.push(px);
    }
    (out, composites)
}

/// Renders `mesh` with colors from `color_field` at the surface points.
pub fn render_mesh<F: RadianceField + ?Sized, R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    color_field: &F,
    pose: &CameraPose,
    height: usize,
    width: usize,
    settings: &RasterSettings,
    rng: &mut R,
) -> Result<RenderOutput> {
    pose.validate()?;
    let background = settings.background.resolve(rng);
    let (view, pixels) = rasterize(mesh, pose, height, width, settings.temperature);
    let (points, _) = sample_points(&pixels, &view.eye, color_field.bound());
    let colors = if points.is_empty() { Vec::new() } else { color_field.query(&points)?.color };
    Ok(assemble(mesh, &pixels, &colors, height, width, background, settings.normal_threshold).0)
}

/// Forward state for [`render_mesh_backward`].
pub struct MeshTape {
    pose: CameraPose,
    width: usize,
    temperature: f64,
    normal_threshold: f64,
    background: [f64; 3],
    pixels: Vec<Vec<FragGeom>>,
    clamped: Vec<[bool; 3]>,
    field: Option<FieldTape>,
    colors: Vec<[f64; 3]>,
    composites: Vec<Composite>,
}

impl MeshTape {
    pub fn background(&self) -> [f64; 3] {
        self.background
    }
}

pub fn render_mesh_train<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    field: &VolumeField,
    pose: &CameraPose,
    height: usize,
    width: usize,
    settings: &RasterSettings,
    rng: &mut R,
) -> Result<(RenderOutput, MeshTape)> {
    pose.validate()?;
    let background = settings.background.resolve(rng);
    let (view, pixels) = rasterize(mesh, pose, height, width, settings.temperature);
    let (points, clamped) = sample_points(&pixels, &view.eye, field.bound());
    let (colors, field_tape) = if points.is_empty() {
        (Vec::new(), None)
    } else {
        let (samples, tape) = field.query_with_tape(&points)?;
        (samples.color, Some(tape))
    };
    let (out, composites) = assemble(mesh, &pixels, &colors, height, width, background, settings.normal_threshold);
    let tape = MeshTape {
        pose: *pose,
        width,
        temperature: settings.temperature,
        normal_threshold: settings.normal_threshold,
        background,
        pixels,
        clamped,
        field: field_tape,
        colors,
        composites,
    };
    Ok((out, tape))
}

/// Accumulates color-field gradients into `field_grad` and returns the
/// gradient on every mesh position.
pub fn render_mesh_backward(
    mesh: &TriangleMesh,
    field: &VolumeField,
    tape: &MeshTape,
    grad: &RenderGrad,
    field_grad: &mut FieldGrad,
) -> Result<Vec<Vec3>> {
    let view = View::new(mesh, &tape.pose);
    let mut d_vertices = vec![Vec3::zeros(); mesh.positions.len()];
    let n_frags: usize = tape.pixels.iter().map(Vec::len).sum();
    let mut all_grads: Vec<FragmentGrad> = Vec::with_capacity(n_frags);
    let mut d_t = Vec::with_capacity(n_frags);
    let mut frags = Vec::new();
    let mut frag_grads: Vec<FragmentGrad> = Vec::new();
    let mut k = 0;
    for (i, geoms) in tape.pixels.iter().enumerate() {
        if geoms.is_empty() {
            continue;
        }
        frags.clear();
        for (j, g) in geoms.iter().enumerate() {
            frags.push(Fragment {
                alpha: g.alpha,
                t: g.t,
                color: tape.colors[k + j],
                normal: face_normal(mesh, &mesh.triangles[g.tri as usize]).normalize(),
            });
        }
        k += geoms.len();
        let px = &tape.composites[i];
        let pg = grad.pixel(i / tape.width, i % tape.width);
        composite_backward(&frags, tape.background, px, tape.normal_threshold, &pg, &mut frag_grads);
        let g_depth_sum = if px.opacity >= DEPTH_EPSILON { pg.depth / px.opacity } else { 0.0 };
        let mut trans = 1.0;
        for (g, fg) in geoms.iter().zip(&frag_grads) {
            d_t.push(g_depth_sum * trans * g.alpha);
            trans *= 1.0 - g.alpha;
            all_grads.push(*fg);
            if let Some(e) = g.edge {
                coverage_backward(mesh, &view, tape.temperature, g, e as usize, fg.alpha, &mut d_vertices);
            }
        }
    }

    let mut d_points = vec![Vec3::zeros(); n_frags];
    if let Some(ft) = &tape.field {
        let d_color: Vec<[f64; 3]> = all_grads.iter().map(|g| g.color).collect();
        field.backward(ft, &vec![0.0; n_frags], &d_color, field_grad, Some(&mut d_points));
    }

    // Ray-plane distance and face normal chains.
    for (k, g) in tape.pixels.iter().flatten().enumerate() {
        let tri = mesh.triangles[g.tri as usize];
        let p = |m: usize| mesh.positions[tri[m] as usize];
        let (v0, e1, e2) = (p(0), p(1) - p(0), p(2) - p(0));
        let n = e1.cross(&e2);
        let mut g_n = normalize_vjp(&n, &all_grads[k].normal);
        let mut dp = d_points[k];
        for a in 0..3 {
            if tape.clamped[k][a] {
                dp[a] = 0.0;
            }
        }
        let dt = d_t[k] + dp.dot(&g.dir);
        let mut g_v0 = Vec3::zeros();
        if dt != 0.0 {
            let den = n.dot(&g.dir);
            g_n += ((v0 - view.eye) - g.dir * g.t) * (dt / den);
            g_v0 += n * (dt / den);
        }
        let g_e1 = e2.cross(&g_n);
        let g_e2 = g_n.cross(&e1);
        d_vertices[tri[0] as usize] += g_v0 - g_e1 - g_e2;
        d_vertices[tri[1] as usize] += g_e1;
        d_vertices[tri[2] as usize] += g_e2;
    }
    Ok(d_vertices)
}

/// Coverage gradient through the signed distance to edge `e` of the fragment's triangle.
fn coverage_backward(mesh: &TriangleMesh, view: &View, temperature: f64, g: &FragGeom, e: usize, d_alpha: f64, d_vertices: &mut [Vec3]) {
    let sg = sigmoid(g.dist * g.dist.abs() / temperature);
    let d_dist = d_alpha * sg * (1.0 - sg) * 2.0 * g.dist.abs() / temperature / view.extent;
    if d_dist == 0.0 {
        return;
    }
    let tri = mesh.triangles[g.tri as usize];
    let (ia, ib, ic) = (tri[e] as usize, tri[(e + 1) % 3] as usize, tri[(e + 2) % 3] as usize);
    let (a, b, c) = (view.screen[ia], view.screen[ib], view.screen[ic]);
    let orient = cross2(sub2(b, a), sub2(c, a)).signum();
    let ev = sub2(b, a);
    let wv = sub2(g.slope, a);
    let len = (ev[0] * ev[0] + ev[1] * ev[1]).sqrt();
    let cr = cross2(ev, wv);
    // dist = orient * cr / len, before the extent scaling folded into d_dist.
    let scale = orient * d_dist;
    let len3 = len * len * len;
    let ga = [
        scale * ((ev[1] - wv[1]) / len + cr * ev[0] / len3),
        scale * ((wv[0] - ev[0]) / len + cr * ev[1] / len3),
    ];
    let gb = [
        scale * (wv[1] / len - cr * ev[0] / len3),
        scale * (-wv[0] / len - cr * ev[1] / len3),
    ];
    for (idx, gs) in [(ia, ga), (ib, gb)] {
        let q = view.camera[idx];
        let g_q = Vec3::new(-gs[0] / q.z, -gs[1] / q.z, (gs[0] * q.x + gs[1] * q.y) / (q.z * q.z));
        d_vertices[idx] += view.rotation * g_q;
    }
}
