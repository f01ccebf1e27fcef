//! Edge-function triangle rasterizer with perspective-correct interpolation.
//!
//! The inside test here is the single source of truth for pixel coverage:
//! the soft silhouette's signed distance uses the same orientation-corrected
//! edge functions, which keeps hard coverage and thresholded soft coverage
//! consistent by construction.

use crate::error::{Error, Result};
use crate::geometry::{pinhole, Intrinsics, Pose, TriangleMesh, Z_MIN};
use nalgebra::Vector2;
use std::sync::atomic::{AtomicUsize, Ordering};

static RENDER_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the number of worker threads used by the rasterizer and silhouette
/// kernels. Outputs are bit-identical for any value; 1 is the default.
pub fn set_render_threads(n: usize) {
    RENDER_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn render_threads() -> usize {
    RENDER_THREADS.load(Ordering::Relaxed)
}

/// Projected triangle with CCW-ordered screen vertices.
#[derive(Debug, Clone)]
pub struct FaceSetup {
    pub face: usize,
    /// Screen positions, reordered so the signed area is positive.
    pub v2d: [Vector2<f64>; 3],
    /// Camera-frame depth per reordered vertex.
    pub z: [f64; 3],
    /// Mesh vertex indices in the reordered orientation.
    pub indices: [usize; 3],
    pub area2: f64,
    /// Edge-on sliver: covers no pixels in the rasterizer, but still carries
    /// a (negative) signed distance so the soft silhouette stays continuous
    /// as faces flip through zero projected area.
    pub degenerate: bool,
    /// Pixel bbox (x0, y0, x1, y1), half-open, clipped to the image.
    pub bbox: (usize, usize, usize, usize),
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

impl FaceSetup {
    /// Whether a screen point is inside, from edge-function signs alone
    /// (no division, valid for degenerate faces too).
    #[inline]
    pub fn inside(&self, p: &Vector2<f64>) -> bool {
        if self.degenerate {
            return false;
        }
        edge(&self.v2d[1], &self.v2d[2], p) >= 0.0
            && edge(&self.v2d[2], &self.v2d[0], p) >= 0.0
            && edge(&self.v2d[0], &self.v2d[1], p) >= 0.0
    }

    /// Barycentric coordinates (matching `v2d` order) of a screen point,
    /// and whether the point is inside. Callers must not interpolate with
    /// degenerate faces.
    #[inline]
    pub fn barycentric(&self, p: &Vector2<f64>) -> ([f64; 3], bool) {
        let e0 = edge(&self.v2d[1], &self.v2d[2], p);
        let e1 = edge(&self.v2d[2], &self.v2d[0], p);
        let e2 = edge(&self.v2d[0], &self.v2d[1], p);
        let inside = e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0;
        let inv = 1.0 / self.area2;
        ([e0 * inv, e1 * inv, e2 * inv], inside)
    }

    /// Perspective-correct depth and attribute weights at barycentric `l`.
    #[inline]
    pub fn depth_and_weights(&self, l: &[f64; 3]) -> (f64, [f64; 3]) {
        let inv_z = l[0] / self.z[0] + l[1] / self.z[1] + l[2] / self.z[2];
        let z = 1.0 / inv_z;
        (
            z,
            [
                l[0] / self.z[0] * z,
                l[1] / self.z[1] * z,
                l[2] / self.z[2] * z,
            ],
        )
    }
}

/// Projects all vertices and prepares per-face raster data. Skips faces that
/// project to zero screen area; errors if any vertex falls at or behind z_min.
pub fn setup_faces(
    pose: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    dilate: f64,
) -> Result<(Vec<FaceSetup>, Vec<Vector2<f64>>, Vec<f64>)> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut screen = Vec::with_capacity(mesh.vertices.len());
    let mut depth = Vec::with_capacity(mesh.vertices.len());
    for v in &mesh.vertices {
        let c = pose.transform_point(v);
        if c.z <= Z_MIN {
            return Err(Error::DepthBehindCamera { z: c.z, z_min: Z_MIN });
        }
        screen.push(pinhole(k, &c));
        depth.push(c.z);
    }

    let mut faces = Vec::with_capacity(mesh.faces.len());
    for (fi, f) in mesh.faces.iter().enumerate() {
        let mut idx = *f;
        let mut v2d = [screen[idx[0]], screen[idx[1]], screen[idx[2]]];
        let mut area2 = edge(&v2d[0], &v2d[1], &v2d[2]);
        if area2 < 0.0 {
            idx.swap(1, 2);
            v2d.swap(1, 2);
            area2 = -area2;
        }
        let degenerate = area2 < 1e-12;
        let z = [depth[idx[0]], depth[idx[1]], depth[idx[2]]];
        let min_x = v2d.iter().map(|v| v.x).fold(f64::INFINITY, f64::min) - dilate;
        let max_x = v2d.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max) + dilate;
        let min_y = v2d.iter().map(|v| v.y).fold(f64::INFINITY, f64::min) - dilate;
        let max_y = v2d.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max) + dilate;
        if max_x < 0.0 || max_y < 0.0 || min_x >= k.width as f64 || min_y >= k.height as f64 {
            continue;
        }
        let x0 = min_x.floor().max(0.0) as usize;
        let y0 = min_y.floor().max(0.0) as usize;
        let x1 = (max_x.ceil() as usize + 1).min(k.width);
        let y1 = (max_y.ceil() as usize + 1).min(k.height);
        faces.push(FaceSetup {
            face: fi,
            v2d,
            z,
            indices: idx,
            area2,
            degenerate,
            bbox: (x0, y0, x1, y1),
        });
    }
    Ok((faces, screen, depth))
}

/// Per-pixel nearest hit: face slot index (usize::MAX = miss), depth, and
/// perspective-correct attribute weights.
pub struct RasterHits {
    pub width: usize,
    pub height: usize,
    pub face_slot: Vec<usize>,
    pub z: Vec<f64>,
    pub weights: Vec<[f64; 3]>,
}

/// Z-buffer rasterization over pixel centers. On exact depth ties the lower
/// face index wins, which keeps output independent of traversal order.
pub fn rasterize(faces: &[FaceSetup], width: usize, height: usize) -> RasterHits {
    let mut hits = RasterHits {
        width,
        height,
        face_slot: vec![usize::MAX; width * height],
        z: vec![0.0; width * height],
        weights: vec![[0.0; 3]; width * height],
    };
    let threads = render_threads().min(height.max(1));
    if threads <= 1 {
        rasterize_rows(faces, width, 0, height, &mut hits.face_slot, &mut hits.z, &mut hits.weights);
        return hits;
    }

    let rows_per = height.div_ceil(threads);
    let mut slot_bands: Vec<&mut [usize]> = hits.face_slot.chunks_mut(rows_per * width).collect();
    let mut z_bands: Vec<&mut [f64]> = hits.z.chunks_mut(rows_per * width).collect();
    let mut w_bands: Vec<&mut [[f64; 3]]> = hits.weights.chunks_mut(rows_per * width).collect();
    std::thread::scope(|s| {
        let mut y0 = 0usize;
        for ((slot, z), w) in slot_bands
            .iter_mut()
            .zip(z_bands.iter_mut())
            .zip(w_bands.iter_mut())
        {
            let y1 = (y0 + rows_per).min(height);
            let band_y0 = y0;
            s.spawn(move || {
                rasterize_rows(faces, width, band_y0, y1, slot, z, w);
            });
            y0 = y1;
        }
    });
    hits
}

fn rasterize_rows(
    faces: &[FaceSetup],
    width: usize,
    y0: usize,
    y1: usize,
    slot: &mut [usize],
    zbuf: &mut [f64],
    wbuf: &mut [[f64; 3]],
) {
    for (si, fs) in faces.iter().enumerate() {
        if fs.degenerate {
            continue;
        }
        let (bx0, by0, bx1, by1) = fs.bbox;
        let ry0 = by0.max(y0);
        let ry1 = by1.min(y1);
        for y in ry0..ry1 {
            let py = y as f64 + 0.5;
            let row = (y - y0) * width;
            for x in bx0..bx1 {
                let p = Vector2::new(x as f64 + 0.5, py);
                let (l, inside) = fs.barycentric(&p);
                if !inside {
                    continue;
                }
                let (z, w) = fs.depth_and_weights(&l);
                let i = row + x;
                if slot[i] == usize::MAX || z < zbuf[i] {
                    slot[i] = si;
                    zbuf[i] = z;
                    wbuf[i] = w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use nalgebra::Vector3;

    #[test]
    fn square_face_at_z2_has_depth_2() {
        let mesh = shapes::single_triangle(
            Vector3::new(-0.5, -0.5, 2.0),
            Vector3::new(0.5, -0.5, 2.0),
            Vector3::new(0.0, 0.5, 2.0),
        );
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let (faces, _, _) = setup_faces(&Pose::identity(), &mesh, &k, 0.0).unwrap();
        let hits = rasterize(&faces, 64, 64);
        let i = 32 * 64 + 32;
        assert_ne!(hits.face_slot[i], usize::MAX);
        assert!((hits.z[i] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zbuffer_takes_nearest() {
        let mesh = crate::geometry::TriangleMesh::new(
            vec![
                Vector3::new(-0.5, -0.5, 1.0),
                Vector3::new(0.5, -0.5, 1.0),
                Vector3::new(0.0, 0.5, 1.0),
                Vector3::new(-0.5, -0.5, 2.0),
                Vector3::new(0.5, -0.5, 2.0),
                Vector3::new(0.0, 0.5, 2.0),
            ],
            vec![[3, 4, 5], [0, 1, 2]],
            None,
        )
        .unwrap();
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap();
        let (faces, _, _) = setup_faces(&Pose::identity(), &mesh, &k, 0.0).unwrap();
        let hits = rasterize(&faces, 64, 64);
        let i = 32 * 64 + 32;
        assert!((hits.z[i] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_matches_single_thread() {
        let mesh = shapes::textured_icosphere(1, 0.3);
        let pose = Pose::from_parts(
            nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(0.3, 0.2, 0.1)),
            Vector3::new(0.02, -0.01, 1.0),
        );
        let k = Intrinsics::new(120.0, 120.0, 48.0, 48.0, 96, 96).unwrap();
        let (faces, _, _) = setup_faces(&pose, &mesh, &k, 0.0).unwrap();
        let a = rasterize(&faces, 96, 96);
        set_render_threads(4);
        let b = rasterize(&faces, 96, 96);
        set_render_threads(1);
        assert_eq!(a.face_slot, b.face_slot);
        assert_eq!(a.z, b.z);
    }
}
