//! Training objectives: pose consistency between two representations,
//! synthetic supervised Huber loss, perceptual proxy, MS-SSIM warp loss,
//! silhouette masking and occlusion augmentation, and the weighted total.

mod ssim;

pub use ssim::{
    ms_ssim, ms_ssim_grad, ms_ssim_masked, ms_ssim_masked_grad, perceptual_proxy,
    perceptual_proxy_grad, ssim_single_scale, C1, C2, MSSSIM_WEIGHTS,
};

use crate::error::{Error, Result};
use crate::geometry::{transform_point_vjp_pose, Intrinsics, PoseTangent, TriangleMesh};
use crate::pnp::{pnp_solve, pnp_vjp};
use crate::renderer::ImageBuffer;
use crate::representation::{to_correspondences_indexed, CorrSource, RepCotangent, Representation};
use rand::Rng;

/// Weights of the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_pose: f64,
    pub lambda_sup: f64,
    pub lambda_percep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pose: 1.0,
            lambda_sup: 1.0,
            lambda_percep: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pose < 0.0 || self.lambda_sup < 0.0 || self.lambda_percep < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.lambda_pose + self.lambda_sup + self.lambda_percep <= 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar losses plus the accumulated parameter gradient.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_pose: f64,
    pub l_sup: f64,
    pub l_percep: f64,
    pub l_total: f64,
    pub grad_theta: Vec<f64>,
}

/// Weighted sum of the three parts; each part carries its own theta gradient.
pub fn total_loss(
    l_pose: f64,
    grad_pose: &[f64],
    l_sup: f64,
    grad_sup: &[f64],
    l_percep: f64,
    grad_percep: &[f64],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    for (name, v) in [("l_pose", l_pose), ("l_sup", l_sup), ("l_percep", l_percep)] {
        if !v.is_finite() {
            let _ = name;
            return Err(Error::NonFinite("loss part"));
        }
    }
    let n = grad_pose.len().max(grad_sup.len()).max(grad_percep.len());
    let mut grad_theta = vec![0.0; n];
    let add = |out: &mut [f64], g: &[f64], lambda: f64| -> Result<()> {
        if g.is_empty() {
            return Ok(());
        }
        if g.len() != out.len() {
            return Err(Error::LengthMismatch {
                a: g.len(),
                b: out.len(),
            });
        }
        for (o, &v) in out.iter_mut().zip(g) {
            *o += lambda * v;
        }
        Ok(())
    };
    add(&mut grad_theta, grad_pose, w.lambda_pose)?;
    add(&mut grad_theta, grad_sup, w.lambda_sup)?;
    add(&mut grad_theta, grad_percep, w.lambda_percep)?;
    if grad_theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grad_theta"));
    }
    Ok(LossReport {
        l_pose,
        l_sup,
        l_percep,
        l_total: w.lambda_pose * l_pose + w.lambda_sup * l_sup + w.lambda_percep * l_percep,
        grad_theta,
    })
}

/// Background removal: per-pixel multiply of the image by a soft silhouette.
pub fn silhouette_mask(image: &ImageBuffer, sil: &ImageBuffer) -> Result<ImageBuffer> {
    image.mul_mask(sil)
}

/// Occlusion patch parameters: patch count range and per-axis side fractions.
#[derive(Debug, Clone, Copy)]
pub struct OcclusionConfig {
    pub count_min: usize,
    pub count_max: usize,
    pub frac_min: f64,
    pub frac_max: f64,
    pub noise_mean: f64,
    pub noise_sigma: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            count_min: 1,
            count_max: 3,
            frac_min: 0.1,
            frac_max: 0.4,
            noise_mean: 0.5,
            noise_sigma: 0.25,
        }
    }
}

/// Augmented image, silhouette with occluded parts excluded, and the binary
/// keep mask (0 inside patches) for gradient bookkeeping.
pub struct OcclusionResult {
    pub image: ImageBuffer,
    pub sil: ImageBuffer,
    pub keep_mask: ImageBuffer,
}

fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Places 1..=3 (configurable) noise-filled rectangles on the image and zeroes
/// the silhouette inside them.
pub fn occlusion_augment(
    image: &ImageBuffer,
    sil: &ImageBuffer,
    cfg: &OcclusionConfig,
    rng: &mut impl Rng,
) -> OcclusionResult {
    let mut out = image.clone();
    let mut keep = ImageBuffer::filled(image.width, image.height, 1, 1.0);
    let count = if cfg.count_max == 0 {
        0
    } else {
        rng.gen_range(cfg.count_min..=cfg.count_max)
    };
    for _ in 0..count {
        let pw = ((rng.gen_range(cfg.frac_min..=cfg.frac_max) * image.width as f64).round()
            as usize)
            .clamp(1, image.width);
        let ph = ((rng.gen_range(cfg.frac_min..=cfg.frac_max) * image.height as f64).round()
            as usize)
            .clamp(1, image.height);
        let x0 = rng.gen_range(0..=image.width - pw);
        let y0 = rng.gen_range(0..=image.height - ph);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                for c in 0..image.channels {
                    let v = cfg.noise_mean + cfg.noise_sigma * normal_sample(rng);
                    out.set(x, y, c, v.clamp(0.0, 1.0));
                }
                keep.set(x, y, 0, 0.0);
            }
        }
    }
    let sil_out = ImageBuffer {
        width: sil.width,
        height: sil.height,
        channels: sil.channels,
        data: sil
            .data
            .iter()
            .zip(&keep.data)
            .map(|(&s, &k)| s * k)
            .collect(),
    };
    OcclusionResult {
        image: out,
        sil: sil_out,
        keep_mask: keep,
    }
}

#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Elementwise Huber between representations of the same kind, averaged.
/// For the dense kind, coordinates are penalized only where the ground-truth
/// mask is on, and the mask channel uses an L1 penalty against the
/// ground-truth mask. The gradient lands on the prediction.
pub fn supervised_loss(
    pred: &Representation,
    gt: &Representation,
    delta: f64,
) -> Result<(f64, RepCotangent)> {
    match (pred, gt) {
        (Representation::Sparse { points: p }, Representation::Sparse { points: g }) => {
            if p.len() != g.len() {
                return Err(Error::LengthMismatch {
                    a: p.len(),
                    b: g.len(),
                });
            }
            let n = (2 * p.len()) as f64;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(p.len());
            for (pp, gg) in p.iter().zip(g) {
                let rx = pp.x - gg.x;
                let ry = pp.y - gg.y;
                loss += huber(rx, delta) + huber(ry, delta);
                grads.push(nalgebra::Vector2::new(
                    huber_grad(rx, delta) / n,
                    huber_grad(ry, delta) / n,
                ));
            }
            Ok((loss / n, RepCotangent::Sparse { points: grads }))
        }
        (
            Representation::Dense { coords: pc, mask: pm },
            Representation::Dense { coords: gc, mask: gm },
        ) => {
            pc.expect_shape(gc, "dense coords")?;
            pm.expect_shape(gm, "dense mask")?;
            let mut g_coords = ImageBuffer::new(pc.width, pc.height, 3);
            let mut g_mask = ImageBuffer::new(pm.width, pm.height, 1);
            // Coordinate Huber on ground-truth foreground.
            let mut coord_loss = 0.0;
            let mut n_coord = 0usize;
            for i in 0..pm.data.len() {
                if gm.data[i] >= 0.5 {
                    n_coord += 3;
                    for c in 0..3 {
                        let r = pc.data[i * 3 + c] - gc.data[i * 3 + c];
                        coord_loss += huber(r, delta);
                        g_coords.data[i * 3 + c] = huber_grad(r, delta);
                    }
                }
            }
            let coord_norm = 1.0 / n_coord.max(1) as f64;
            coord_loss *= coord_norm;
            for v in &mut g_coords.data {
                *v *= coord_norm;
            }
            // Mask L1 over all pixels.
            let mut mask_loss = 0.0;
            let mask_norm = 1.0 / pm.data.len() as f64;
            for i in 0..pm.data.len() {
                let r = pm.data[i] - gm.data[i];
                mask_loss += r.abs();
                g_mask.data[i] = r.signum() * mask_norm;
            }
            mask_loss *= mask_norm;
            Ok((
                coord_loss + mask_loss,
                RepCotangent::Dense {
                    coords: g_coords,
                    mask: g_mask,
                },
            ))
        }
        _ => Err(Error::KindMismatch),
    }
}

/// Pose-consistency loss: mean 3D distance between model vertices transformed
/// by the two poses recovered from `h2` and `h3`, with gradients delivered
/// back onto both representations through the implicit PnP derivative.
pub struct PoseConsistency {
    pub loss: f64,
    pub grad_h2: RepCotangent,
    pub grad_h3: RepCotangent,
    pub pose2: crate::geometry::Pose,
    pub pose3: crate::geometry::Pose,
}

pub fn pose_consistency_loss(
    h2: &Representation,
    h3: &Representation,
    mesh: &TriangleMesh,
    k: &Intrinsics,
) -> Result<PoseConsistency> {
    let (c2, src2) = to_correspondences_indexed(h2, mesh)?;
    let (c3, src3) = to_correspondences_indexed(h3, mesh)?;
    let sol2 = pnp_solve(&c2, k)?;
    let sol3 = pnp_solve(&c3, k)?;

    let n = mesh.vertices.len() as f64;
    let mut loss = 0.0;
    let mut cot2 = PoseTangent::zeros();
    let mut cot3 = PoseTangent::zeros();
    for v in &mesh.vertices {
        let p2 = sol2.pose.transform_point(v);
        let p3 = sol3.pose.transform_point(v);
        let diff = p2 - p3;
        let d = diff.norm();
        loss += d / n;
        if d > 1e-12 {
            let u = diff / (d * n);
            cot2 += transform_point_vjp_pose(&sol2.pose, v, &u);
            cot3 += transform_point_vjp_pose(&sol3.pose, v, &(-u));
        }
    }

    let (g2d_2, gw_2) = pnp_vjp(&c2, k, &sol2.pose, &cot2)?;
    let (g2d_3, gw_3) = pnp_vjp(&c3, k, &sol3.pose, &cot3)?;
    let grad_h2 = scatter_correspondence_grads(h2, &src2, &g2d_2, &gw_2);
    let grad_h3 = scatter_correspondence_grads(h3, &src3, &g2d_3, &gw_3);
    Ok(PoseConsistency {
        loss,
        grad_h2,
        grad_h3,
        pose2: sol2.pose,
        pose3: sol3.pose,
    })
}

/// Routes PnP input gradients back to the representation: pixel gradients for
/// the sparse kind, weight (mask) gradients for the dense kind. Dense 2D
/// points are fixed pixel centers, so only the mask channel receives
/// gradient through PnP; the coordinate channels learn through the
/// supervised loss.
fn scatter_correspondence_grads(
    h: &Representation,
    src: &[CorrSource],
    g2d: &[nalgebra::Vector2<f64>],
    gw: &[f64],
) -> RepCotangent {
    let mut out = RepCotangent::zeros_like(h);
    match &mut out {
        RepCotangent::Sparse { points } => {
            for (s, g) in src.iter().zip(g2d) {
                if let CorrSource::Sparse(i) = s {
                    points[*i] += g;
                }
            }
        }
        RepCotangent::Dense { mask, .. } => {
            for (s, g) in src.iter().zip(gw) {
                if let CorrSource::Dense { x, y } = s {
                    let i = mask.idx(*x, *y, 0);
                    mask.data[i] += g;
                }
            }
        }
    }
    out
}

/// Warp-alignment loss: `1 - ms_ssim(warped, target * target_sil)`.
/// Returns gradients w.r.t. the warped image and the target silhouette.
pub struct WarpLoss {
    pub loss: f64,
    pub grad_warped: ImageBuffer,
    pub grad_target_sil: ImageBuffer,
}

pub fn warp_loss(
    warped: &ImageBuffer,
    target: &ImageBuffer,
    target_sil: &ImageBuffer,
) -> Result<WarpLoss> {
    warp_loss_impl(warped, target, target_sil, None)
}

/// Warp loss with windows restricted to `validity >= 0.5` pixels.
pub fn warp_loss_masked(
    warped: &ImageBuffer,
    target: &ImageBuffer,
    target_sil: &ImageBuffer,
    validity: &ImageBuffer,
) -> Result<WarpLoss> {
    warp_loss_impl(warped, target, target_sil, Some(validity))
}

fn warp_loss_impl(
    warped: &ImageBuffer,
    target: &ImageBuffer,
    target_sil: &ImageBuffer,
    validity: Option<&ImageBuffer>,
) -> Result<WarpLoss> {
    warped.expect_shape(target, "warp loss inputs")?;
    let masked_target = silhouette_mask(target, target_sil)?;
    let (score, g_warped, g_masked) = match validity {
        Some(v) => ms_ssim_masked_grad(warped, &masked_target, v)?,
        None => ms_ssim_grad(warped, &masked_target)?,
    };
    // d(1 - s)/d(warped) and chain masked_target = target * sil into sil.
    let mut grad_warped = g_warped;
    for v in &mut grad_warped.data {
        *v = -*v;
    }
    let mut grad_sil = ImageBuffer::new(target_sil.width, target_sil.height, 1);
    for y in 0..target.height {
        for x in 0..target.width {
            let mut s = 0.0;
            for c in 0..target.channels {
                s += -g_masked.get(x, y, c) * target.get(x, y, c);
            }
            grad_sil.set(x, y, 0, s);
        }
    }
    Ok(WarpLoss {
        loss: 1.0 - score,
        grad_warped,
        grad_target_sil: grad_sil,
    })
}
