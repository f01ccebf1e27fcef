//! Differentiable renderer: color, depth and silhouette from
//! (pose, mesh, intrinsics). Pose gradients flow through the soft
//! silhouette only; color and depth are forward-only.

mod image;
pub mod io;
mod raster;
mod silhouette;

pub use image::ImageBuffer;
pub use raster::{rasterize, render_threads, set_render_threads, setup_faces, RasterHits};
pub use silhouette::{soft_silhouette, soft_silhouette_fwd, soft_silhouette_vjp, SilhouetteTape};

use crate::error::Result;
use crate::geometry::{Intrinsics, Pose, TriangleMesh};
use nalgebra::Vector3;

/// Default soft-silhouette bandwidth in pixels.
pub const SIGMA_DEFAULT: f64 = 1.0;
/// Ambient fraction of the flat headlight shading model. The Lambert term is
/// kept mild so surface appearance stays nearly view-independent, which the
/// photometric warp comparison relies on.
pub const AMBIENT: f64 = 0.8;

/// Output of a full render pass.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: ImageBuffer,
    pub depth: ImageBuffer,
    pub silhouette: ImageBuffer,
    pub pose_used: Pose,
}

/// Hard z-buffer rasterization with flat per-face shading (vertex-color mean
/// times a fixed headlight Lambert term). The silhouette channel thresholds
/// at 0.5 exactly where depth has a hit.
pub fn render(pose: &Pose, mesh: &TriangleMesh, k: &Intrinsics) -> Result<RenderOutput> {
    let (faces, _, _) = setup_faces(pose, mesh, k, 0.0)?;
    let hits = rasterize(&faces, k.width, k.height);

    // Per-face flat shade: albedo * (ambient + (1-ambient) * |n.l|),
    // light at the camera origin.
    let shades: Vec<[f64; 3]> = faces
        .iter()
        .map(|fs| {
            let vs = [
                pose.transform_point(&mesh.vertices[fs.indices[0]]),
                pose.transform_point(&mesh.vertices[fs.indices[1]]),
                pose.transform_point(&mesh.vertices[fs.indices[2]]),
            ];
            let n = (vs[1] - vs[0]).cross(&(vs[2] - vs[0]));
            let centroid: Vector3<f64> = (vs[0] + vs[1] + vs[2]) / 3.0;
            let lambert = if n.norm() > 0.0 && centroid.norm() > 0.0 {
                (n.normalize().dot(&(-centroid.normalize()))).abs()
            } else {
                0.0
            };
            let albedo = mesh.face_color(fs.face);
            let s = AMBIENT + (1.0 - AMBIENT) * lambert;
            [albedo[0] * s, albedo[1] * s, albedo[2] * s]
        })
        .collect();

    let mut color = ImageBuffer::new(k.width, k.height, 3);
    let mut depth = ImageBuffer::new(k.width, k.height, 1);
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let slot = hits.face_slot[i];
            if slot == usize::MAX {
                continue;
            }
            depth.set(x, y, 0, hits.z[i]);
            let s = shades[slot];
            for c in 0..3 {
                color.set(x, y, c, s[c].clamp(0.0, 1.0));
            }
        }
    }
    let silhouette = silhouette::hard_silhouette(&faces, k, SIGMA_DEFAULT);
    Ok(RenderOutput {
        color,
        depth,
        silhouette,
        pose_used: *pose,
    })
}

/// Nearest-hit camera-frame depth; 0 at misses.
pub fn render_depth(pose: &Pose, mesh: &TriangleMesh, k: &Intrinsics) -> Result<ImageBuffer> {
    let (faces, _, _) = setup_faces(pose, mesh, k, 0.0)?;
    let hits = rasterize(&faces, k.width, k.height);
    let mut depth = ImageBuffer::new(k.width, k.height, 1);
    for (i, &slot) in hits.face_slot.iter().enumerate() {
        if slot != usize::MAX {
            depth.data[i] = hits.z[i];
        }
    }
    Ok(depth)
}

/// Object-coordinate render for dense representations: per hit pixel the
/// perspective-correct interpolated object-frame position normalized to
/// [0,1] by the mesh AABB, plus a 0/1 hit mask.
pub fn render_object_coordinates(
    pose: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let (faces, _, _) = setup_faces(pose, mesh, k, 0.0)?;
    let hits = rasterize(&faces, k.width, k.height);
    let (lo, hi) = mesh.aabb();
    let span = hi - lo;
    let mut coords = ImageBuffer::new(k.width, k.height, 3);
    let mut mask = ImageBuffer::new(k.width, k.height, 1);
    for y in 0..k.height {
        for x in 0..k.width {
            let i = y * k.width + x;
            let slot = hits.face_slot[i];
            if slot == usize::MAX {
                continue;
            }
            let fs = &faces[slot];
            let w = hits.weights[i];
            let p = mesh.vertices[fs.indices[0]] * w[0]
                + mesh.vertices[fs.indices[1]] * w[1]
                + mesh.vertices[fs.indices[2]] * w[2];
            for c in 0..3 {
                let denom = if span[c].abs() < 1e-12 { 1.0 } else { span[c] };
                coords.set(x, y, c, ((p[c] - lo[c]) / denom).clamp(0.0, 1.0));
            }
            mask.set(x, y, 0, 1.0);
        }
    }
    Ok((coords, mask))
}

/// Maps normalized object coordinates back to the object frame.
pub fn denormalize_coordinate(mesh: &TriangleMesh, c: [f64; 3]) -> Vector3<f64> {
    let (lo, hi) = mesh.aabb();
    Vector3::new(
        lo.x + c[0] * (hi.x - lo.x),
        lo.y + c[1] * (hi.y - lo.y),
        lo.z + c[2] * (hi.z - lo.z),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use nalgebra::{UnitQuaternion, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k128() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    fn face_on_cube_pose() -> Pose {
        // Front face 1 m from the camera.
        Pose::from_parts(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 1.5))
    }

    #[test]
    fn cube_silhouette_area_matches_projection() {
        let cube = shapes::unit_cube();
        let out = render(&face_on_cube_pose(), &cube, &k128()).unwrap();
        let count = out.silhouette.data.iter().filter(|&&v| v >= 0.5).count() as f64;
        let expect = 100.0 * 100.0;
        assert!(
            (count - expect).abs() / expect < 0.05,
            "covered {count} px, expected about {expect}"
        );
    }

    #[test]
    fn out_of_frustum_renders_nothing() {
        let cube = shapes::unit_cube();
        let pose = Pose::from_parts(UnitQuaternion::identity(), Vector3::new(10.0, 0.0, 1.5));
        let out = render(&pose, &cube, &k128()).unwrap();
        assert!(out.silhouette.data.iter().all(|&v| v == 0.0));
        assert!(out.depth.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_is_deterministic() {
        let mesh = shapes::textured_icosphere(1, 0.3);
        let pose = Pose::from_parts(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.2, -0.4, 0.6)),
            Vector3::new(0.01, 0.02, 1.0),
        );
        let a = render(&pose, &mesh, &k128()).unwrap();
        let b = render(&pose, &mesh, &k128()).unwrap();
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.depth.data, b.depth.data);
        assert_eq!(a.silhouette.data, b.silhouette.data);
    }

    #[test]
    fn depth_zero_exactly_where_silhouette_below_half() {
        let mesh = shapes::textured_icosphere(1, 0.3);
        let pose = Pose::from_parts(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.5, 0.1, -0.2)),
            Vector3::new(0.0, 0.0, 1.1),
        );
        let out = render(&pose, &mesh, &k128()).unwrap();
        for i in 0..out.depth.data.len() {
            let hit = out.depth.data[i] > 0.0;
            let sil = out.silhouette.data[i] >= 0.5;
            assert_eq!(hit, sil, "pixel {i}");
        }
    }

    #[test]
    fn depth_within_vertex_depth_range() {
        let mesh = shapes::textured_icosphere(1, 0.25);
        let pose = Pose::from_parts(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.3, 0.9, 0.0)),
            Vector3::new(0.0, 0.0, 0.9),
        );
        let out = render(&pose, &mesh, &k128()).unwrap();
        let zs: Vec<f64> = mesh.vertices.iter().map(|v| pose.transform_point(v).z).collect();
        let lo = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &z in &out.depth.data {
            if z > 0.0 {
                assert!(z >= lo - 1e-9 && z <= hi + 1e-9);
            }
        }
    }

    /// Möller-Trumbore intersection, an independent depth oracle.
    fn ray_hit_depth(mesh: &TriangleMesh, pose: &Pose, k: &Intrinsics, px: Vector2<f64>) -> Option<f64> {
        let dir = Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
        let mut best: Option<f64> = None;
        for f in &mesh.faces {
            let v0 = pose.transform_point(&mesh.vertices[f[0]]);
            let v1 = pose.transform_point(&mesh.vertices[f[1]]);
            let v2 = pose.transform_point(&mesh.vertices[f[2]]);
            let e1 = v1 - v0;
            let e2 = v2 - v0;
            let h = dir.cross(&e2);
            let a = e1.dot(&h);
            if a.abs() < 1e-14 {
                continue;
            }
            let f_inv = 1.0 / a;
            let s = -v0;
            let u = f_inv * s.dot(&h);
            if !(-1e-9..=1.0 + 1e-9).contains(&u) {
                continue;
            }
            let q = s.cross(&e1);
            let v = f_inv * dir.dot(&q);
            if v < -1e-9 || u + v > 1.0 + 1e-9 {
                continue;
            }
            let t = f_inv * e2.dot(&q);
            if t > 0.0 {
                let z = t * dir.z;
                best = Some(best.map_or(z, |b: f64| b.min(z)));
            }
        }
        best
    }

    #[test]
    fn depth_matches_ray_casting_oracle() {
        let cube = shapes::unit_cube();
        let pose = Pose::from_parts(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.4, 0.3, 0.2)),
            Vector3::new(0.0, 0.0, 2.0),
        );
        let k = k128();
        let depth = render_depth(&pose, &cube, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut checked = 0;
        while checked < 100 {
            let x = rng.gen_range(0..k.width);
            let y = rng.gen_range(0..k.height);
            let z = depth.get(x, y, 0);
            if z == 0.0 {
                continue;
            }
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let oracle = ray_hit_depth(&cube, &pose, &k, px).expect("raster hit must ray-hit");
            assert!((z - oracle).abs() < 1e-5, "({x},{y}): raster {z} ray {oracle}");
            checked += 1;
        }
    }

    #[test]
    fn translation_shifts_silhouette_centroid() {
        let cube = shapes::unit_cube();
        let k = k128();
        let base = face_on_cube_pose();
        let delta = 0.02;
        let moved = Pose::from_parts(base.rotation, base.translation + Vector3::new(delta, 0.0, 0.0));
        let centroid = |img: &ImageBuffer| {
            let mut sx = 0.0;
            let mut n = 0.0;
            for y in 0..img.height {
                for x in 0..img.width {
                    if img.get(x, y, 0) >= 0.5 {
                        sx += x as f64;
                        n += 1.0;
                    }
                }
            }
            sx / n
        };
        let a = centroid(&render(&base, &cube, &k).unwrap().silhouette);
        let b = centroid(&render(&moved, &cube, &k).unwrap().silhouette);
        let expect = k.fx * delta / 1.0; // front face depth 1 m dominates
        assert!((b - a - expect).abs() < 1.0, "shift {}, expected about {expect}", b - a);
    }

    #[test]
    fn silhouette_area_shrinks_moving_away() {
        let mesh = shapes::textured_icosphere(1, 0.3);
        let k = k128();
        let pose = Pose::from_parts(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 1.2));
        let (_, tape) = soft_silhouette_fwd(&pose, &mesh, &k, 1.0).unwrap();
        let cot = ImageBuffer::filled(k.width, k.height, 1, 1.0);
        let g = soft_silhouette_vjp(&pose, &mesh, &k, &tape, &cot);
        // d(area)/d(t_z) must be negative.
        assert!(g[5] < 0.0, "area gradient wrt z translation = {}", g[5]);
    }

    #[test]
    fn hard_and_threshold_soft_agree_up_to_boundary() {
        let mesh = shapes::textured_icosphere(1, 0.3);
        let k = k128();
        let pose = Pose::from_parts(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.7, 0.3)),
            Vector3::new(0.0, 0.0, 1.1),
        );
        let hard = render(&pose, &mesh, &k).unwrap().silhouette;
        let soft = soft_silhouette(&pose, &mesh, &k, 0.1).unwrap();
        let mut mismatches = 0;
        let mut boundary = 0;
        for y in 0..k.height {
            for x in 0..k.width {
                let h = hard.get(x, y, 0) >= 0.5;
                let s = soft.get(x, y, 0) >= 0.5;
                if h != s {
                    mismatches += 1;
                }
                if h {
                    let mut edge = false;
                    for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                        let nx = x as i64 + dx;
                        let ny = y as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= k.width as i64 || ny >= k.height as i64 {
                            edge = true;
                        } else if hard.get(nx as usize, ny as usize, 0) < 0.5 {
                            edge = true;
                        }
                    }
                    if edge {
                        boundary += 1;
                    }
                }
            }
        }
        assert!(
            mismatches <= boundary,
            "{mismatches} mismatches vs {boundary} boundary pixels"
        );
    }

    #[test]
    fn object_coordinates_round_trip_through_aabb() {
        let mesh = shapes::textured_icosphere(1, 0.2);
        let k = k128();
        let pose = Pose::from_parts(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 1.0));
        let (coords, mask) = render_object_coordinates(&pose, &mesh, &k).unwrap();
        let depth = render_depth(&pose, &mesh, &k).unwrap();
        let mut checked = 0;
        for y in (0..k.height).step_by(7) {
            for x in (0..k.width).step_by(7) {
                if mask.get(x, y, 0) < 0.5 {
                    continue;
                }
                let c = [coords.get(x, y, 0), coords.get(x, y, 1), coords.get(x, y, 2)];
                let obj = denormalize_coordinate(&mesh, c);
                let cam = pose.transform_point(&obj);
                // Reprojected pixel must be the pixel center; depth must match.
                let px = crate::geometry::pinhole(&k, &cam);
                assert!((px.x - (x as f64 + 0.5)).abs() < 1e-6);
                assert!((px.y - (y as f64 + 0.5)).abs() < 1e-6);
                assert!((cam.z - depth.get(x, y, 0)).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
