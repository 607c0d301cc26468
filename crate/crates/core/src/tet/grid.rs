use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::field::RadianceField;
use crate::{Error, Result, Vec3};

/// Body-centered-cubic tetrahedral grid with a learnable SDF and bounded
/// per-vertex deformation. `sdf` is in units of grid cells: negative inside.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    resolution: usize,
    bound: f64,
    spacing: f64,
    vertices: Vec<Vec3>,
    tets: Vec<[u32; 4]>,
    pub sdf: Vec<f64>,
    /// Unconstrained deformation; the offset is `(spacing / 2) tanh(raw)`.
    pub deform_raw: Vec<f64>,
}

impl TetMesh {
    /// Tetrahedralizes a `resolution^3` lattice spanning `[-bound, bound]^3`.
    /// Lattice corners and cell centers are vertices; each pair of face-adjacent
    /// centers forms an octahedron with the shared face, split into four tets,
    /// and boundary faces form pyramids split into two.
    pub fn bcc(resolution: usize, bound: f64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid("tet grid resolution must be at least 2"));
        }
        if !(bound > 0.0) {
            return Err(Error::invalid("tet grid bound must be positive"));
        }
        let r = resolution;
        let h = 2.0 * bound / r as f64;
        let n_corner = (r + 1).pow(3);
        let corner = |i: usize, j: usize, k: usize| ((i * (r + 1) + j) * (r + 1) + k) as u32;
        let center = |i: usize, j: usize, k: usize| (n_corner + (i * r + j) * r + k) as u32;

        let mut vertices = Vec::with_capacity(n_corner + r * r * r);
        for i in 0..=r {
            for j in 0..=r {
                for k in 0..=r {
                    vertices.push(Vec3::new(i as f64, j as f64, k as f64) * h - Vec3::repeat(bound));
                }
            }
        }
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    vertices.push(Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * h - Vec3::repeat(bound));
                }
            }
        }

        let mut tets = Vec::new();
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    let c = center(i, j, k);
                    let cell = [i, j, k];
                    for axis in 0..3 {
                        for side in 0..2 {
                            // Square face of this cell orthogonal to `axis`, as a cycle.
                            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                            let mut base = cell;
                            base[axis] += side;
                            let quad: Vec<u32> = [(0, 0), (1, 0), (1, 1), (0, 1)]
                                .iter()
                                .map(|&(du, dv)| {
                                    let mut p = base;
                                    p[u] += du;
                                    p[v] += dv;
                                    corner(p[0], p[1], p[2])
                                })
                                .collect();
                            let neighbor = if side == 1 {
                                (cell[axis] + 1 < r).then(|| {
                                    let mut n = cell;
                                    n[axis] += 1;
                                    n
                                })
                            } else if cell[axis] == 0 {
                                None
                            } else {
                                // Interior faces are emitted once, from the lower cell.
                                continue;
                            };
                            match neighbor {
                                Some(n) => {
                                    let other = center(n[0], n[1], n[2]);
                                    for e in 0..4 {
                                        tets.push([c, other, quad[e], quad[(e + 1) % 4]]);
                                    }
                                }
                                None => {
                                    tets.push([c, quad[0], quad[1], quad[2]]);
                                    tets.push([c, quad[0], quad[2], quad[3]]);
                                }
                            }
                        }
                    }
                }
            }
        }
        for t in &mut tets {
            if signed_volume(&vertices, t) < 0.0 {
                t.swap(2, 3);
            }
        }
        let n = vertices.len();
        Ok(Self {
            resolution,
            bound,
            spacing: h,
            vertices,
            tets,
            sdf: vec![1.0; n],
            deform_raw: vec![0.0; 3 * n],
        })
    }

    /// Arbitrary tetrahedralization; `spacing` bounds the deformation.
    /// Tets with negative volume are reoriented, degenerate ones rejected.
    pub fn from_parts(vertices: Vec<Vec3>, mut tets: Vec<[u32; 4]>, spacing: f64) -> Result<Self> {
        let n = vertices.len();
        for t in &mut tets {
            if t.iter().any(|i| *i as usize >= n) {
                return Err(Error::invalid(format!("tet {t:?} indexes past {n} vertices")));
            }
            let v = signed_volume(&vertices, t);
            if v == 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("tet {t:?} is degenerate")));
            }
            if v < 0.0 {
                t.swap(2, 3);
            }
        }
        let bound = vertices.iter().map(|v| v.amax()).fold(0.0, f64::max);
        Ok(Self {
            resolution: 0,
            bound,
            spacing,
            vertices,
            tets,
            sdf: vec![1.0; n],
            deform_raw: vec![0.0; 3 * n],
        })
    }

    /// Grid with the SDF sampled from `f` and scaled to cell units.
    pub fn from_sdf_fn(resolution: usize, bound: f64, f: impl Fn(&Vec3) -> f64) -> Result<Self> {
        let mut mesh = Self::bcc(resolution, bound)?;
        let h = mesh.spacing();
        mesh.sdf = mesh.vertices.iter().map(|p| f(p) / h).collect();
        Ok(mesh)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Lattice spacing, or the deformation scale for meshes built from parts.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[u32; 4]] {
        &self.tets
    }

    pub fn deformation(&self, i: usize) -> Vec3 {
        let half = 0.5 * self.spacing();
        Vec3::new(
            half * self.deform_raw[3 * i].tanh(),
            half * self.deform_raw[3 * i + 1].tanh(),
            half * self.deform_raw[3 * i + 2].tanh(),
        )
    }

    /// Rest position plus deformation.
    pub fn deformed(&self, i: usize) -> Vec3 {
        self.vertices[i] + self.deformation(i)
    }

    /// Adds the raw-parameter gradient for a cotangent on `deformed(i)`.
    pub(crate) fn deform_backward(&self, i: usize, d_position: &Vec3, d_raw: &mut [f64]) {
        let half = 0.5 * self.spacing();
        for a in 0..3 {
            let th = self.deform_raw[3 * i + a].tanh();
            d_raw[3 * i + a] += d_position[a] * half * (1.0 - th * th);
        }
    }

    pub fn max_deformation(&self) -> f64 {
        (0..self.vertices.len())
            .map(|i| self.deformation(i).amax())
            .fold(0.0, f64::max)
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.sdf, &mut self.deform_raw]
    }

    pub fn param_groups(&self) -> Vec<&[f64]> {
        vec![&self.sdf, &self.deform_raw]
    }

    /// Edges of the tetrahedralization, each once.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut seen = HashMap::new();
        for t in &self.tets {
            for (a, b) in TET_EDGES {
                let key = ordered(t[a], t[b]);
                seen.entry(key).or_insert(());
            }
        }
        let mut out: Vec<_> = seen.into_keys().collect();
        out.sort_unstable();
        out
    }
}

pub(crate) const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

pub(crate) fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub(crate) fn signed_volume(vertices: &[Vec3], t: &[u32; 4]) -> f64 {
    let p = |i: usize| vertices[t[i] as usize];
    (p(1) - p(0)).cross(&(p(2) - p(0))).dot(&(p(3) - p(0))) / 6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TetInitConfig {
    pub resolution: usize,
    pub iso_density: f64,
}

impl Default for TetInitConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            iso_density: 10.0,
        }
    }
}

/// Builds a grid whose SDF is a logistic transform of `density - iso_density`,
/// with zero deformation. The logistic slope is chosen from the density
/// gradient across sign-changing edges so that the transition spans about one
/// grid cell.
pub fn init_from_field<F: RadianceField + ?Sized>(field: &F, resolution: usize, iso_density: f64) -> Result<TetMesh> {
    if resolution < 8 {
        return Err(Error::invalid("tet grid resolution must be at least 8"));
    }
    let mut mesh = TetMesh::bcc(resolution, field.bound())?;
    let h = mesh.spacing();
    let mut density = Vec::with_capacity(mesh.vertices.len());
    for chunk in mesh.vertices.chunks(16384) {
        // Boundary vertices sit exactly on the bound; pull them in by a hair.
        let inside: Vec<Vec3> = chunk
            .iter()
            .map(|p| p.map(|c| c.clamp(-field.bound() * (1.0 - 1e-9), field.bound() * (1.0 - 1e-9))))
            .collect();
        density.extend(field.query(&inside)?.density);
    }
    if density.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            what: "density during tet initialization".into(),
        });
    }
    if !density.iter().any(|d| *d > iso_density) {
        return Err(Error::EmptyInitialization { iso_density });
    }
    let mut slopes: Vec<f64> = mesh
        .edges()
        .into_iter()
        .filter_map(|(a, b)| {
            let (da, db) = (density[a as usize], density[b as usize]);
            ((da > iso_density) != (db > iso_density)).then(|| {
                let len = (mesh.vertices[a as usize] - mesh.vertices[b as usize]).norm();
                (da - db).abs() / len
            })
        })
        .collect();
    let k = if slopes.is_empty() {
        1.0
    } else {
        slopes.sort_by(f64::total_cmp);
        let g = slopes[slopes.len() / 2].max(1e-12);
        4.0 / (g * h)
    };
    mesh.sdf = density
        .iter()
        .map(|d| 0.5 - crate::math::sigmoid(k * (d - iso_density)))
        .collect();
    Ok(mesh)
}
