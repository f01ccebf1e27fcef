//! Soft (differentiable) and hard silhouettes from projected triangles.
//!
//! Per face the soft map uses a smoothed signed-distance field: the product
//! of per-edge half-plane sigmoids
//!
//!   o_f = prod_i sigmoid(s_i / sigma),   s_i = inward line distance,
//!
//! equivalently a signed distance d_f = sigma * logit(o_f) that matches the
//! true signed edge distance away from corners. Faces aggregate with a
//! log-sum-exp smooth max at temperature 1/sigma, written in odds space:
//!
//!   S = sum_f exp(d_f / sigma) = sum_f o_f / (1 - o_f),   o = S / (1 + S).
//!
//! One face dominating reduces to sigmoid(d/sigma) exactly. Unlike a hard
//! min over edge segments, the field is continuous in the pose even for
//! sliver faces flipping through zero area, which keeps the VJP honest
//! under finite-difference checks. The hard variant uses the exact
//! segment-distance sign so its 0.5 level set coincides with raster
//! coverage bit-for-bit.

use super::image::ImageBuffer;
use super::raster::{render_threads, setup_faces, FaceSetup};
use crate::error::Result;
use crate::geometry::{
    pinhole_jacobian, transform_point_vjp_pose, Intrinsics, Pose, PoseTangent, TriangleMesh,
};
use nalgebra::Vector2;

/// Contributions beyond this many sigmas from a face bbox are dropped.
const CUTOFF_SIGMAS: f64 = 20.0;
/// Per-edge exponent clamp; sigmoids are saturated past this.
const MAX_EXPONENT: f64 = 35.0;
/// Shortest projected edge length treated as directional (pixels).
const MIN_EDGE_LEN: f64 = 1e-6;

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inward signed line distance of edge `(a, b)` (CCW interior on the left),
/// with gradients w.r.t. the endpoints.
#[inline]
fn line_distance_grad(
    p: &Vector2<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
) -> (f64, Vector2<f64>, Vector2<f64>) {
    let e = b - a;
    let len = e.norm().max(MIN_EDGE_LEN);
    let c = e.x * (p.y - a.y) - e.y * (p.x - a.x);
    let s = c / len;
    let dc_da = Vector2::new(b.y - p.y, p.x - b.x);
    let dc_db = Vector2::new(p.y - a.y, a.x - p.x);
    let dlen_da = -e / len;
    let dlen_db = e / len;
    let ga = dc_da / len - dlen_da * (c / (len * len));
    let gb = dc_db / len - dlen_db * (c / (len * len));
    (s, ga, gb)
}

/// Odds `t_f = o_f / (1 - o_f)` of the per-face occupancy at a pixel.
#[inline]
fn face_odds(fs: &FaceSetup, p: &Vector2<f64>, sigma: f64) -> f64 {
    let mut ln_o = 0.0;
    for i in 0..3 {
        let (s, _, _) = line_distance_grad(p, &fs.v2d[i], &fs.v2d[(i + 1) % 3]);
        let a = (s / sigma).clamp(-MAX_EXPONENT, MAX_EXPONENT);
        ln_o -= softplus(-a);
    }
    // ln_o < 0 always (clamped sigmoids never reach 1 exactly).
    ln_o.exp() / (-ln_o.exp_m1())
}

fn accumulate_rows(faces: &[FaceSetup], width: usize, y0: usize, y1: usize, sigma: f64, acc: &mut [f64]) {
    for fs in faces {
        let (bx0, by0, bx1, by1) = fs.bbox;
        let ry0 = by0.max(y0);
        let ry1 = by1.min(y1);
        for y in ry0..ry1 {
            let py = y as f64 + 0.5;
            let row = (y - y0) * width;
            for x in bx0..bx1 {
                let p = Vector2::new(x as f64 + 0.5, py);
                acc[row + x] += face_odds(fs, &p, sigma);
            }
        }
    }
}

fn accumulate(faces: &[FaceSetup], k: &Intrinsics, sigma: f64) -> Vec<f64> {
    let (w, h) = (k.width, k.height);
    let mut acc = vec![0.0; w * h];
    let threads = render_threads().min(h.max(1));
    if threads <= 1 {
        accumulate_rows(faces, w, 0, h, sigma, &mut acc);
        return acc;
    }
    let rows_per = h.div_ceil(threads);
    let bands: Vec<&mut [f64]> = acc.chunks_mut(rows_per * w).collect();
    std::thread::scope(|s| {
        let mut y0 = 0usize;
        for band in bands {
            let y1 = (y0 + rows_per).min(h);
            let band_y0 = y0;
            s.spawn(move || accumulate_rows(faces, w, band_y0, y1, sigma, band));
            y0 = y1;
        }
    });
    acc
}

/// Cached forward state for the soft-silhouette VJP.
pub struct SilhouetteTape {
    faces: Vec<FaceSetup>,
    /// Per-pixel odds sum S.
    s: Vec<f64>,
    sigma: f64,
}

/// Differentiable soft silhouette. `sigma` is in pixels and must be > 0.
pub fn soft_silhouette(
    pose: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    sigma: f64,
) -> Result<ImageBuffer> {
    Ok(soft_silhouette_fwd(pose, mesh, k, sigma)?.0)
}

/// Soft silhouette plus the tape needed for `soft_silhouette_vjp`.
pub fn soft_silhouette_fwd(
    pose: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    sigma: f64,
) -> Result<(ImageBuffer, SilhouetteTape)> {
    assert!(sigma > 0.0, "sigma must be positive");
    let (faces, _, _) = setup_faces(pose, mesh, k, CUTOFF_SIGMAS * sigma)?;
    let s = accumulate(&faces, k, sigma);
    let mut img = ImageBuffer::new(k.width, k.height, 1);
    for (o, &si) in img.data.iter_mut().zip(&s) {
        *o = si / (1.0 + si);
    }
    Ok((img, SilhouetteTape { faces, s, sigma }))
}

/// VJP of the soft silhouette w.r.t. the pose chart.
pub fn soft_silhouette_vjp(
    pose: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    tape: &SilhouetteTape,
    cot: &ImageBuffer,
) -> PoseTangent {
    let sigma = tape.sigma;
    let width = k.width;

    // Accumulate cotangents on projected vertex positions.
    let mut vert_cot: Vec<Vector2<f64>> = vec![Vector2::zeros(); mesh.vertices.len()];
    for fs in &tape.faces {
        let (bx0, by0, bx1, by1) = fs.bbox;
        for y in by0..by1 {
            let py = y as f64 + 0.5;
            for x in bx0..bx1 {
                let g = cot.data[y * width + x];
                if g == 0.0 {
                    continue;
                }
                let p = Vector2::new(x as f64 + 0.5, py);
                let big_s = tape.s[y * width + x];

                let mut a = [0.0; 3];
                let mut ga = [Vector2::zeros(); 3];
                let mut gb = [Vector2::zeros(); 3];
                let mut ln_o = 0.0;
                for i in 0..3 {
                    let (s, gai, gbi) = line_distance_grad(&p, &fs.v2d[i], &fs.v2d[(i + 1) % 3]);
                    a[i] = (s / sigma).clamp(-MAX_EXPONENT, MAX_EXPONENT);
                    ln_o -= softplus(-a[i]);
                    ga[i] = gai;
                    gb[i] = gbi;
                }
                let t = ln_o.exp() / (-ln_o.exp_m1());
                // dL/da_i = g * t (1 + t) q_i / (1 + S)^2, grouped so every
                // factor stays bounded even when t is astronomically large.
                let r1 = t / (1.0 + big_s);
                let r2 = (1.0 + t) / (1.0 + big_s);
                for i in 0..3 {
                    if a[i].abs() >= MAX_EXPONENT {
                        continue; // clamped in forward
                    }
                    let q = sigmoid(-a[i]);
                    let g_a = g * r1 * r2 * q;
                    let g_s = g_a / sigma;
                    vert_cot[fs.indices[i]] += ga[i] * g_s;
                    vert_cot[fs.indices[(i + 1) % 3]] += gb[i] * g_s;
                }
            }
        }
    }

    // Chain through the projection into the pose chart.
    let mut g_pose = PoseTangent::zeros();
    for (vi, g2d) in vert_cot.iter().enumerate() {
        if g2d.x == 0.0 && g2d.y == 0.0 {
            continue;
        }
        let v = mesh.vertices[vi];
        let c = pose.transform_point(&v);
        let jp = pinhole_jacobian(k, &c);
        let g_cam = jp.transpose() * g2d;
        g_pose += transform_point_vjp_pose(pose, &v, &g_cam);
    }
    g_pose
}

/// Distance from `p` to segment `(a, b)`.
fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let e = b - a;
    let len2 = e.norm_squared();
    if len2 <= 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&e) / len2).clamp(0.0, 1.0);
    (p - (a + e * t)).norm()
}

/// Hard-max silhouette over the exact per-face signed segment distance:
/// `sigmoid(max_f d_f / sigma)`. Its 0.5 level set coincides exactly with the
/// rasterizer's coverage, which `render` relies on to keep the depth and
/// silhouette channels consistent.
pub(crate) fn hard_silhouette(faces: &[FaceSetup], k: &Intrinsics, sigma: f64) -> ImageBuffer {
    let (w, h) = (k.width, k.height);
    let mut best = vec![f64::NEG_INFINITY; w * h];
    for fs in faces {
        let (bx0, by0, bx1, by1) = fs.bbox;
        for y in by0..by1 {
            let py = y as f64 + 0.5;
            for x in bx0..bx1 {
                let p = Vector2::new(x as f64 + 0.5, py);
                let mut d = f64::INFINITY;
                for i in 0..3 {
                    d = d.min(segment_distance(&p, &fs.v2d[i], &fs.v2d[(i + 1) % 3]));
                }
                if !fs.inside(&p) {
                    d = -d;
                }
                let i = y * w + x;
                if d > best[i] {
                    best[i] = d;
                }
            }
        }
    }
    let mut img = ImageBuffer::new(w, h, 1);
    for (o, &d) in img.data.iter_mut().zip(&best) {
        *o = if d == f64::NEG_INFINITY {
            0.0
        } else {
            sigmoid((d / sigma).clamp(-MAX_EXPONENT, MAX_EXPONENT))
        };
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k64() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 32.0, 64, 64).unwrap()
    }

    // Triangle whose projected vertices are (10.5,10.5), (50.5,10.5), (30.5,50.5).
    fn edge_triangle() -> TriangleMesh {
        let to3d = |u: f64, v: f64| Vector3::new((u - 32.0) / 100.0, (v - 32.0) / 100.0, 1.0);
        shapes::single_triangle(to3d(10.5, 10.5), to3d(50.5, 10.5), to3d(30.5, 50.5))
    }

    #[test]
    fn deep_inside_saturates() {
        let mesh = edge_triangle();
        let sil = soft_silhouette(&Pose::identity(), &mesh, &k64(), 1.0).unwrap();
        // Pixel (30, 20): well inside, far from all edges.
        assert!(sil.get(30, 20, 0) > 0.99);
    }

    #[test]
    fn pixel_on_edge_is_half() {
        let mesh = edge_triangle();
        let sil = soft_silhouette(&Pose::identity(), &mesh, &k64(), 1.0).unwrap();
        // Pixel (30,10) center (30.5, 10.5) lies exactly on the bottom edge.
        let v = sil.get(30, 10, 0);
        assert!((v - 0.5).abs() < 1e-6, "edge value {v}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mesh = shapes::tetrahedron(0.12);
        let k = k64();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = 1e-4;
        for _ in 0..8 {
            let pose = Pose::from_parts(
                nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 1.0),
            );
            let (sil, tape) = soft_silhouette_fwd(&pose, &mesh, &k, 1.0).unwrap();
            let cot = ImageBuffer::filled(sil.width, sil.height, 1, 1.0);
            let g = soft_silhouette_vjp(&pose, &mesh, &k, &tape, &cot);
            for i in 0..6 {
                let mut d = PoseTangent::zeros();
                d[i] = h;
                let fp: f64 = soft_silhouette(&pose.apply_tangent(&d), &mesh, &k, 1.0)
                    .unwrap()
                    .data
                    .iter()
                    .sum();
                d[i] = -h;
                let fm: f64 = soft_silhouette(&pose.apply_tangent(&d), &mesh, &k, 1.0)
                    .unwrap()
                    .data
                    .iter()
                    .sum();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(1e-3);
                assert!(rel < 1e-3, "coord {i}: fd={fd} vjp={}", g[i]);
            }
        }
    }

    #[test]
    fn line_distance_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..200 {
            let p = Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let a = Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let b = Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            if (a - b).norm() < 0.1 {
                continue;
            }
            let (_, ga, gb) = line_distance_grad(&p, &a, &b);
            for c in 0..2 {
                let mut ap = a;
                ap[c] += h;
                let (dp, _, _) = line_distance_grad(&p, &ap, &b);
                ap[c] -= 2.0 * h;
                let (dm, _, _) = line_distance_grad(&p, &ap, &b);
                let fd = (dp - dm) / (2.0 * h);
                assert!((fd - ga[c]).abs() < 1e-4, "a[{c}] fd={fd} g={}", ga[c]);
                let mut bp = b;
                bp[c] += h;
                let (dp, _, _) = line_distance_grad(&p, &a, &bp);
                bp[c] -= 2.0 * h;
                let (dm, _, _) = line_distance_grad(&p, &a, &bp);
                let fd = (dp - dm) / (2.0 * h);
                assert!((fd - gb[c]).abs() < 1e-4, "b[{c}] fd={fd} g={}", gb[c]);
            }
        }
    }
}
