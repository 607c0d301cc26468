//! Fine-stage surface: a deformable tetrahedral grid carrying an SDF, its
//! marching-tetrahedra surface, a soft mesh rasterizer and OBJ export.

mod grid;
mod marching;
mod obj;
mod raster;

pub use grid::{init_from_field, TetInitConfig, TetMesh};
pub use marching::{marching_backward, marching_tetrahedra, IsoVertex, TriangleMesh, ZERO_TIE_BREAK};
pub use obj::{export_obj, sample_vertex_colors};
pub use raster::{render_mesh, render_mesh_backward, render_mesh_train, MeshTape, RasterSettings};
