//! SE(3) poses, pinhole camera model and triangle meshes.
//!
//! Rotations are stored as unit quaternions and re-normalized after every
//! composition. Pose gradients everywhere in this crate live in a 6-dim
//! local chart at the pose: a perturbation `(w, v)` acts as
//! `R <- exp(w^) * R`, `t <- t + v`. All vector-Jacobian products (VJPs)
//! take and produce cotangents in that chart.

mod mesh;
mod obj;
pub mod shapes;

pub use mesh::{bbox_corners, mesh_diameter, TriangleMesh};
pub use obj::{load_obj, save_obj};

use crate::error::{Error, Result};
use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};

/// Minimum camera-frame depth; anything at or below errors out rather than
/// being silently clamped, so divergent optimization states surface early.
pub const Z_MIN: f64 = 1e-4;

/// Rigid transform: rotation (unit quaternion) followed by translation, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Cotangent / tangent in the local pose chart: `[w_x, w_y, w_z, v_x, v_y, v_z]`.
pub type PoseTangent = Vector6<f64>;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from raw quaternion components (w, x, y, z) and translation.
    /// The quaternion is normalized.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, t: Vector3<f64>) -> Self {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: t,
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Quaternion components in (w, x, y, z) order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_points(&self, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|p| self.transform_point(p)).collect()
    }

    /// Geodesic rotation distance in radians, with quaternion double-cover
    /// disambiguation: `2 asin(min(1, min(|q1-q2|, |q1+q2|)/2))`.
    pub fn rotation_geodesic(&self, other: &Pose) -> f64 {
        let a = self.rotation.quaternion();
        let b = other.rotation.quaternion();
        let d = (a - b).norm().min((a + b).norm());
        2.0 * (d * 0.5).min(1.0).asin()
    }

    /// Applies a chart perturbation: `R <- exp(w^) R`, `t <- t + v`.
    pub fn apply_tangent(&self, delta: &PoseTangent) -> Pose {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation: UnitQuaternion::new_normalize((UnitQuaternion::from_scaled_axis(w) * self.rotation).into_inner()),
            translation: self.translation + v,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// VJP of `transform_point` w.r.t. the pose: given the cotangent on the
/// transformed point, returns the pose-chart cotangent.
pub fn transform_point_vjp_pose(pose: &Pose, point: &Vector3<f64>, cot: &Vector3<f64>) -> PoseTangent {
    let rx = pose.rotation * point;
    let gw = rx.cross(cot);
    let mut out = PoseTangent::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&gw);
    out.fixed_rows_mut::<3>(3).copy_from(cot);
    out
}

/// Cotangent chain rule through `c = a.compose(b)`: maps a cotangent in c's
/// chart to cotangents in a's and b's charts.
pub fn compose_vjp(a: &Pose, b: &Pose, cot_c: &PoseTangent) -> (PoseTangent, PoseTangent) {
    let gw = Vector3::new(cot_c[0], cot_c[1], cot_c[2]);
    let gv = Vector3::new(cot_c[3], cot_c[4], cot_c[5]);
    // Perturbing a by (w, v): w_c = w, v_c = w x (R_a t_b) + v.
    let ra_tb = a.rotation * b.translation;
    let ga_w = gw + ra_tb.cross(&gv);
    let ga_v = gv;
    // Perturbing b by (w, v): w_c = R_a w, v_c = R_a v.
    let ra_t = a.rotation_matrix().transpose();
    let gb_w = ra_t * gw;
    let gb_v = ra_t * gv;
    let mut ga = PoseTangent::zeros();
    ga.fixed_rows_mut::<3>(0).copy_from(&ga_w);
    ga.fixed_rows_mut::<3>(3).copy_from(&ga_v);
    let mut gb = PoseTangent::zeros();
    gb.fixed_rows_mut::<3>(0).copy_from(&gb_w);
    gb.fixed_rows_mut::<3>(3).copy_from(&gb_v);
    (ga, gb)
}

/// Cotangent chain rule through `q = p.inverse()`.
pub fn inverse_vjp(p: &Pose, cot_q: &PoseTangent) -> PoseTangent {
    let gw = Vector3::new(cot_q[0], cot_q[1], cot_q[2]);
    let gv = Vector3::new(cot_q[3], cot_q[4], cot_q[5]);
    // Perturbing p by (w, v): w_q = -R^T w, v_q = -R^T skew(t) w - R^T v.
    let r = p.rotation_matrix();
    let jw = -r.transpose();
    let jt = -(r.transpose() * skew(&p.translation));
    let gp_w = jw.transpose() * gw + jt.transpose() * gv;
    let gp_v = (-r.transpose()).transpose() * gv;
    let mut gp = PoseTangent::zeros();
    gp.fixed_rows_mut::<3>(0).copy_from(&gp_w);
    gp.fixed_rows_mut::<3>(3).copy_from(&gp_v);
    gp
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of a square window of side `side` at origin `(ox, oy)`
    /// resampled to `out` x `out` pixels.
    pub fn crop(&self, ox: f64, oy: f64, side: f64, out: usize) -> Intrinsics {
        let r = out as f64 / side;
        Intrinsics {
            fx: self.fx * r,
            fy: self.fy * r,
            cx: (self.cx - ox) * r,
            cy: (self.cy - oy) * r,
            width: out,
            height: out,
        }
    }
}

/// Projects one camera-frame point to pixel coordinates.
#[inline]
pub fn pinhole(k: &Intrinsics, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Projects object-frame points through `pose` into pixels.
///
/// Errors with `DepthBehindCamera` if any transformed point has z <= `Z_MIN`.
pub fn project(pose: &Pose, pts: &[Vector3<f64>], k: &Intrinsics) -> Result<Vec<Vector2<f64>>> {
    let mut out = Vec::with_capacity(pts.len());
    for p in pts {
        let c = pose.transform_point(p);
        if c.z <= Z_MIN {
            return Err(Error::DepthBehindCamera { z: c.z, z_min: Z_MIN });
        }
        out.push(pinhole(k, &c));
    }
    Ok(out)
}

/// Jacobian of the pixel w.r.t. the camera-frame point.
#[inline]
pub fn pinhole_jacobian(k: &Intrinsics, c: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / c.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * c.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * c.y * iz * iz,
    )
}

/// 2x6 Jacobian of a projected pixel w.r.t. the pose chart.
pub fn projection_jacobian_pose(
    pose: &Pose,
    point: &Vector3<f64>,
    k: &Intrinsics,
) -> nalgebra::Matrix2x6<f64> {
    let rx = pose.rotation * point;
    let c = rx + pose.translation;
    let jp = pinhole_jacobian(k, &c);
    let mut j = nalgebra::Matrix2x6::zeros();
    let jw = jp * (-skew(&rx));
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
    j
}

/// VJP of `project` w.r.t. the pose and the input points.
pub fn project_vjp(
    pose: &Pose,
    pts: &[Vector3<f64>],
    k: &Intrinsics,
    cot_px: &[Vector2<f64>],
) -> (PoseTangent, Vec<Vector3<f64>>) {
    assert_eq!(pts.len(), cot_px.len());
    let r = pose.rotation_matrix();
    let mut g_pose = PoseTangent::zeros();
    let mut g_pts = Vec::with_capacity(pts.len());
    for (p, g) in pts.iter().zip(cot_px) {
        let rx = pose.rotation * p;
        let c = rx + pose.translation;
        let jp = pinhole_jacobian(k, &c);
        let g_cam = jp.transpose() * g;
        g_pose += transform_point_vjp_pose(pose, p, &g_cam);
        g_pts.push(r.transpose() * g_cam);
    }
    (g_pose, g_pts)
}
