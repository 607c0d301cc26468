use std::collections::HashMap;

use super::grid::{ordered, TetMesh};
use crate::Vec3;

/// SDF values exactly at zero are nudged by this much to the outside.
pub const ZERO_TIE_BREAK: f64 = 1e-8;

/// Where an extracted vertex sits: `lerp(deformed(a), deformed(b), t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoVertex {
    pub a: u32,
    pub b: u32,
    pub t: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub positions: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex color samples, filled on export.
    pub colors: Vec<[f64; 3]>,
    /// Provenance of each position on the tet grid, empty for hand-built meshes.
    pub sources: Vec<IsoVertex>,
}

impl TriangleMesh {
    pub fn new(positions: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            positions,
            triangles,
            colors: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                edges.insert(ordered(t[e], t[(e + 1) % 3]));
            }
        }
        edges.len()
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let used: std::collections::HashSet<u32> = self.triangles.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_count() as i64 + self.triangles.len() as i64
    }

    /// True when every edge is shared by exactly two triangles with opposite
    /// directions, i.e. the surface is closed and consistently oriented.
    pub fn is_closed_and_oriented(&self) -> bool {
        let mut directed: HashMap<(u32, u32), i32> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }
}

fn tie_broken(s: f64) -> f64 {
    if s == 0.0 {
        ZERO_TIE_BREAK
    } else {
        s
    }
}

/// Iso-surface of the SDF over the deformed grid. Vertices on shared edges are
/// emitted once; triangles face toward positive SDF.
pub fn marching_tetrahedra(mesh: &TetMesh) -> TriangleMesh {
    let sdf: Vec<f64> = mesh.sdf.iter().map(|s| tie_broken(*s)).collect();
    let mut out = TriangleMesh::default();
    let mut index: HashMap<(u32, u32), u32> = HashMap::new();
    let position = |i: u32| mesh.deformed(i as usize);

    for tet in mesh.tets() {
        let inside: Vec<usize> = (0..4).filter(|&k| sdf[tet[k] as usize] < 0.0).collect();
        if inside.is_empty() || inside.len() == 4 {
            continue;
        }
        let outside: Vec<usize> = (0..4).filter(|k| !inside.contains(k)).collect();
        let mut vertex = |a: u32, b: u32, out: &mut TriangleMesh| -> u32 {
            let key = ordered(a, b);
            *index.entry(key).or_insert_with(|| {
                let (a, b) = key;
                let (sa, sb) = (sdf[a as usize], sdf[b as usize]);
                let t = sa / (sa - sb);
                let (pa, pb) = (position(a), position(b));
                out.positions.push(pa + (pb - pa) * t);
                out.sources.push(IsoVertex { a, b, t });
                (out.positions.len() - 1) as u32
            })
        };
        let inside_center: Vec3 = inside.iter().map(|&k| position(tet[k])).sum::<Vec3>() / inside.len() as f64;
        let outside_center: Vec3 = outside.iter().map(|&k| position(tet[k])).sum::<Vec3>() / outside.len() as f64;
        let toward_outside = outside_center - inside_center;

        let polygon: Vec<u32> = if inside.len() == 2 || outside.len() == 2 {
            let (i0, i1) = (tet[inside[0]], tet[inside[1]]);
            let (o0, o1) = (tet[outside[0]], tet[outside[1]]);
            vec![
                vertex(i0, o0, &mut out),
                vertex(i0, o1, &mut out),
                vertex(i1, o1, &mut out),
                vertex(i1, o0, &mut out),
            ]
        } else {
            let (lone, rest) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
            rest.iter()
                .map(|&k| vertex(tet[lone], tet[k], &mut out))
                .collect()
        };
        let tris: Vec<[u32; 3]> = if polygon.len() == 4 {
            vec![[polygon[0], polygon[1], polygon[2]], [polygon[0], polygon[2], polygon[3]]]
        } else {
            vec![[polygon[0], polygon[1], polygon[2]]]
        };
        // One winding decides both halves of a quad, so they stay consistent.
        let p = |i: u32| out.positions[i as usize];
        let normal = (p(tris[0][1]) - p(tris[0][0])).cross(&(p(tris[0][2]) - p(tris[0][0])))
            + tris
                .get(1)
                .map(|t| (p(t[1]) - p(t[0])).cross(&(p(t[2]) - p(t[0]))))
                .unwrap_or_else(Vec3::zeros);
        let flip = normal.dot(&toward_outside) < 0.0;
        for mut t in tris {
            if flip {
                t.swap(1, 2);
            }
            out.triangles.push(t);
        }
    }
    out
}

/// Pulls cotangents on extracted positions back to the SDF and the raw
/// deformation parameters.
pub fn marching_backward(mesh: &TetMesh, surface: &TriangleMesh, d_positions: &[Vec3], d_sdf: &mut [f64], d_deform_raw: &mut [f64]) {
    for (src, g) in surface.sources.iter().zip(d_positions) {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (a, b) = (src.a as usize, src.b as usize);
        let (sa, sb) = (tie_broken(mesh.sdf[a]), tie_broken(mesh.sdf[b]));
        let (pa, pb) = (mesh.deformed(a), mesh.deformed(b));
        let denom = (sa - sb) * (sa - sb);
        let along = g.dot(&(pb - pa));
        d_sdf[a] += along * (-sb / denom);
        d_sdf[b] += along * (sa / denom);
        mesh.deform_backward(a, &(g * (1.0 - src.t)), d_deform_raw);
        mesh.deform_backward(b, &(g * src.t), d_deform_raw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_tet(sdf: [f64; 4]) -> TetMesh {
        let vertices = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(0.0, 0.5, 0.0),
            Vec3::new(0.0, 0.0, 0.5),
        ];
        let mut mesh = TetMesh::from_parts(vertices, vec![[0, 1, 2, 3]], 0.5).unwrap();
        mesh.sdf = sdf.to_vec();
        mesh
    }

    fn triangles_in_first_tet(sdf: [f64; 4]) -> usize {
        marching_tetrahedra(&single_tet(sdf)).triangles.len()
    }

    #[test]
    fn case_table_counts() {
        assert_eq!(triangles_in_first_tet([-1.0, 1.0, 1.0, 1.0]), 1);
        assert_eq!(triangles_in_first_tet([1.0, -1.0, -1.0, -1.0]), 1);
        assert_eq!(triangles_in_first_tet([-1.0, -1.0, 1.0, 1.0]), 2);
        assert_eq!(triangles_in_first_tet([1.0, 1.0, 1.0, 1.0]), 0);
        assert_eq!(triangles_in_first_tet([-1.0, -1.0, -1.0, -1.0]), 0);
    }

    #[test]
    fn sphere_surface_is_closed_genus_zero() {
        let mesh = TetMesh::from_sdf_fn(32, 1.0, |p| p.norm() - 0.5).unwrap();
        let surface = marching_tetrahedra(&mesh);
        assert_eq!(surface.euler_characteristic(), 2);
        assert!(surface.is_closed_and_oriented());
        // Outward normals: signed volume is positive.
        let volume: f64 = surface
            .triangles
            .iter()
            .map(|t| {
                let p = |i: usize| surface.positions[t[i] as usize];
                p(0).dot(&p(1).cross(&p(2))) / 6.0
            })
            .sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((volume - exact).abs() < 0.02 * exact, "{volume} vs {exact}");
    }

    #[test]
    fn iso_vertices_interpolate_to_zero() {
        let mesh = TetMesh::from_sdf_fn(12, 1.0, |p| p.norm() - 0.6 + 0.1 * (3.0 * p.x).sin()).unwrap();
        let surface = marching_tetrahedra(&mesh);
        assert!(!surface.is_empty());
        for src in &surface.sources {
            let (sa, sb) = (mesh.sdf[src.a as usize], mesh.sdf[src.b as usize]);
            assert!((sa + (sb - sa) * src.t).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_sdf_is_treated_as_outside() {
        let s = marching_tetrahedra(&single_tet([0.0, -1.0, 1.0, 1.0]));
        assert_eq!(s.triangles.len(), 1);
        let p = |k: usize| s.positions[s.triangles[0][k] as usize];
        let n = (p(1) - p(0)).cross(&(p(2) - p(0)));
        // Faces away from the lone inside vertex at (0.5, 0, 0).
        assert!(n.dot(&(Vec3::new(0.5, 0.0, 0.0) - p(0))) < 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut mesh = TetMesh::from_sdf_fn(4, 1.0, |p| p.norm() - 0.55).unwrap();
        for (i, v) in mesh.deform_raw.iter_mut().enumerate() {
            *v = 0.3 * ((i * 7 % 11) as f64 / 11.0 - 0.5);
        }
        let surface = marching_tetrahedra(&mesh);
        let weights: Vec<Vec3> = (0..surface.positions.len())
            .map(|i| Vec3::new((i % 3) as f64 - 1.0, 0.5, (i % 5) as f64 * 0.2))
            .collect();
        let objective = |m: &TetMesh| -> f64 {
            let s = marching_tetrahedra(m);
            s.positions.iter().zip(&weights).map(|(p, w)| p.dot(w)).sum()
        };
        let mut d_sdf = vec![0.0; mesh.sdf.len()];
        let mut d_raw = vec![0.0; mesh.deform_raw.len()];
        marching_backward(&mesh, &surface, &weights, &mut d_sdf, &mut d_raw);
        let h = 1e-6;
        for &src in surface.sources.iter().take(20) {
            let i = src.a as usize;
            let mut p = mesh.clone();
            p.sdf[i] += h;
            let mut m = mesh.clone();
            m.sdf[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - d_sdf[i]).abs() < 1e-5 * fd.abs().max(1.0), "sdf {i}: {fd} vs {}", d_sdf[i]);
            let j = 3 * src.b as usize + 1;
            let mut p = mesh.clone();
            p.deform_raw[j] += h;
            let mut m = mesh.clone();
            m.deform_raw[j] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - d_raw[j]).abs() < 1e-5 * fd.abs().max(1.0), "raw {j}: {fd} vs {}", d_raw[j]);
        }
    }

    proptest! {
        #[test]
        fn random_fields_give_closed_surfaces(a in -0.3f64..0.3, b in -0.3f64..0.3, r in 0.3f64..0.7) {
            let mesh = TetMesh::from_sdf_fn(10, 1.0, |p| (p - Vec3::new(a, b, 0.0)).norm() - r).unwrap();
            let surface = marching_tetrahedra(&mesh);
            prop_assert!(surface.is_closed_and_oriented());
            for src in &surface.sources {
                let (sa, sb) = (mesh.sdf[src.a as usize], mesh.sdf[src.b as usize]);
                prop_assert!((sa + (sb - sa) * src.t).abs() < 1e-6);
            }
        }
    }
}
