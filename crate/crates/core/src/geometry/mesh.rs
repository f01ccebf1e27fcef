use crate::error::{Error, Result};
use nalgebra::Vector3;

/// Triangle mesh in the object frame: vertices in meters, per-vertex RGB in
/// [0,1], and the cached max pairwise vertex distance (diameter).
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub vertex_colors: Vec<[f64; 3]>,
    pub diameter: f64,
}

pub const DEFAULT_GRAY: [f64; 3] = [0.7, 0.7, 0.7];

impl TriangleMesh {
    /// Validates face indices, rejects zero-area faces and caches the diameter.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        vertex_colors: Option<Vec<[f64; 3]>>,
    ) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let colors = vertex_colors.unwrap_or_else(|| vec![DEFAULT_GRAY; vertices.len()]);
        if colors.len() != vertices.len() {
            return Err(Error::LengthMismatch {
                a: colors.len(),
                b: vertices.len(),
            });
        }
        for (i, f) in faces.iter().enumerate() {
            for &vi in f {
                if vi >= vertices.len() {
                    return Err(Error::Parse {
                        path: String::new(),
                        line: 0,
                        msg: format!("face {i} references vertex {vi} out of {}", vertices.len()),
                    });
                }
            }
            let e1 = vertices[f[1]] - vertices[f[0]];
            let e2 = vertices[f[2]] - vertices[f[0]];
            if e1.cross(&e2).norm() < 1e-12 {
                return Err(Error::DegenerateFace { face: i });
            }
        }
        let diameter = max_pairwise_distance(&vertices);
        Ok(Self {
            vertices,
            faces,
            vertex_colors: colors,
            diameter,
        })
    }

    pub fn face_vertices(&self, f: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Flat face color: mean of the three vertex colors.
    pub fn face_color(&self, f: usize) -> [f64; 3] {
        let [a, b, c] = self.faces[f];
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = (self.vertex_colors[a][ch] + self.vertex_colors[b][ch] + self.vertex_colors[c][ch]) / 3.0;
        }
        out
    }

    /// Axis-aligned bounding box (min, max) in the object frame.
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }
}

fn max_pairwise_distance(vertices: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..vertices.len() {
        for j in (i + 1)..vertices.len() {
            let d = (vertices[i] - vertices[j]).norm_squared();
            if d > best {
                best = d;
            }
        }
    }
    best.sqrt()
}

/// The 8 axis-aligned bounding-box corners in canonical order: lexicographic
/// over (sign_x, sign_y, sign_z) with min before max. PnP correspondence
/// ordering relies on this order.
pub fn bbox_corners(mesh: &TriangleMesh) -> Result<[Vector3<f64>; 8]> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let (lo, hi) = mesh.aabb();
    let mut out = [Vector3::zeros(); 8];
    for (k, corner) in out.iter_mut().enumerate() {
        let x = if k & 4 == 0 { lo.x } else { hi.x };
        let y = if k & 2 == 0 { lo.y } else { hi.y };
        let z = if k & 1 == 0 { lo.z } else { hi.z };
        *corner = Vector3::new(x, y, z);
    }
    Ok(out)
}

/// Max pairwise vertex distance, exact O(n^2).
pub fn mesh_diameter(mesh: &TriangleMesh) -> Result<f64> {
    if mesh.vertices.len() < 2 {
        return Err(Error::EmptyMesh);
    }
    Ok(max_pairwise_distance(&mesh.vertices))
}
