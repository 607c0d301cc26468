use std::io::Write;
use std::path::Path;

use super::marching::TriangleMesh;
use crate::field::RadianceField;
use crate::{Error, Result};

/// Fills `mesh.colors` from the field, clamping positions into its bound.
pub fn sample_vertex_colors<F: RadianceField + ?Sized>(mesh: &mut TriangleMesh, field: &F) -> Result<()> {
    let lim = field.bound() * (1.0 - 1e-9);
    let points: Vec<_> = mesh.positions.iter().map(|p| p.map(|c| c.clamp(-lim, lim))).collect();
    mesh.colors = if points.is_empty() { Vec::new() } else { field.query(&points)?.color };
    Ok(())
}

/// Wavefront OBJ with `v x y z r g b` lines when colors are present.
pub fn export_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    if !mesh.colors.is_empty() && mesh.colors.len() != mesh.positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} colors for {} vertices",
            mesh.colors.len(),
            mesh.positions.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for (i, p) in mesh.positions.iter().enumerate() {
            match mesh.colors.get(i) {
                Some(c) => writeln!(w, "v {} {} {} {:.6} {:.6} {:.6}", p.x, p.y, p.z, c[0], c[1], c[2])?,
                None => writeln!(w, "v {} {} {}", p.x, p.y, p.z)?,
            }
        }
        for t in &mesh.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::UniformField;
    use crate::Vec3;

    #[test]
    fn writes_colored_vertices_and_one_based_faces() {
        let mut mesh = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        );
        sample_vertex_colors(&mut mesh, &UniformField::new(1.0, [0.25, 0.5, 0.75], 1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        export_obj(&path, &mesh).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("v 0 0 0 0.250000 0.500000 0.750000"));
        assert!(text.trim_end().ends_with("f 1 2 3"));
    }
}
