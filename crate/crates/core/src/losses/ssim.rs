//! Structural similarity: single-scale SSIM, multi-scale MS-SSIM with
//! analytic gradients, optional validity masking with per-window
//! renormalization, and the perceptual proxy built on top.
//!
//! Window statistics use a separable Gaussian (11 taps, sigma 1.5 at full
//! resolution, shrunk at tiny scales), valid convolution, and stability
//! constants C1 = 0.01^2, C2 = 0.03^2 on a unit dynamic range. The standard
//! 5-scale weights are renormalized over however many scales the image
//! supports. Per-scale means are clamped nonnegative, which keeps the score
//! and the warp loss inside [0, 1].

use crate::error::{Error, Result};
use crate::renderer::ImageBuffer;

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest supported input side.
pub const MIN_SIDE: usize = 32;
/// Smallest side at which a scale still contributes.
const MIN_SCALE_SIDE: usize = 8;
const CLAMP_EPS: f64 = 1e-9;

/// Single-channel plane with explicit dims.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn new(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    fn from_channel(img: &ImageBuffer, c: usize) -> Self {
        let mut p = Plane::new(img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                p.data[y * img.width + x] = img.get(x, y, c);
            }
        }
        p
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn downsample2(&self) -> Plane {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut out = Plane::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += self.data[(2 * y + dy) * self.w + 2 * x + dx];
                    }
                }
                out.data[y * w + x] = s / 4.0;
            }
        }
        out
    }

    fn downsample2_adjoint(&self, grad: &Plane) -> Plane {
        let mut out = Plane::new(self.w, self.h);
        for y in 0..grad.h {
            for x in 0..grad.w {
                let g = grad.data[y * grad.w + x] / 4.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        out.data[(2 * y + dy) * self.w + 2 * x + dx] += g;
                    }
                }
            }
        }
        out
    }
}

fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f64> {
    let r = (len / 2) as i64;
    let mut k = Vec::with_capacity(len);
    let mut sum = 0.0;
    for i in -r..=r {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        k.push(v);
        sum += v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid convolution; output shrinks by (len-1) per axis.
fn conv_valid(p: &Plane, k: &[f64]) -> Plane {
    let r = k.len() - 1;
    let mut tmp = Plane::new(p.w - r, p.h);
    for y in 0..p.h {
        for x in 0..tmp.w {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * p.data[y * p.w + x + i];
            }
            tmp.data[y * tmp.w + x] = s;
        }
    }
    let mut out = Plane::new(p.w - r, p.h - r);
    for y in 0..out.h {
        for x in 0..out.w {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * tmp.data[(y + i) * tmp.w + x];
            }
            out.data[y * out.w + x] = s;
        }
    }
    out
}

/// Adjoint of `conv_valid`: scatters window gradients back to pixels.
fn conv_valid_adjoint(grad: &Plane, k: &[f64], w: usize, h: usize) -> Plane {
    let r = k.len() - 1;
    let mut tmp = Plane::new(w - r, h);
    for y in 0..grad.h {
        for x in 0..grad.w {
            let g = grad.data[y * grad.w + x];
            if g == 0.0 {
                continue;
            }
            for (i, &kv) in k.iter().enumerate() {
                tmp.data[(y + i) * tmp.w + x] += kv * g;
            }
        }
    }
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for x in 0..tmp.w {
            let g = tmp.data[y * tmp.w + x];
            if g == 0.0 {
                continue;
            }
            for (i, &kv) in k.iter().enumerate() {
                out.data[y * w + x + i] += kv * g;
            }
        }
    }
    out
}

/// One scale of windowed statistics for a channel pair under a shared mask.
struct ScaleStats {
    kernel: Vec<f64>,
    /// Binarized validity over pixels at this scale.
    mhat: Plane,
    /// Per-window weight sum (1.0 everywhere when unmasked).
    d: Plane,
    mu_a: Plane,
    mu_b: Plane,
    saa: Plane,
    sbb: Plane,
    sab: Plane,
}

const WINDOW_MIN_WEIGHT: f64 = 1e-6;

impl ScaleStats {
    fn compute(a: &Plane, b: &Plane, mhat: &Plane, kernel: Vec<f64>) -> ScaleStats {
        let d = conv_valid(mhat, &kernel);
        let wm = |x: &Plane| -> Plane {
            let masked = x.zip(mhat, |v, m| v * m);
            let num = conv_valid(&masked, &kernel);
            num.zip(&d, |n, dd| if dd > WINDOW_MIN_WEIGHT { n / dd } else { 0.0 })
        };
        let mu_a = wm(a);
        let mu_b = wm(b);
        let aa = wm(&a.zip(a, |x, y| x * y));
        let bb = wm(&b.zip(b, |x, y| x * y));
        let ab = wm(&a.zip(b, |x, y| x * y));
        let saa = aa.zip(&mu_a, |m2, mu| m2 - mu * mu);
        let sbb = bb.zip(&mu_b, |m2, mu| m2 - mu * mu);
        let mut sab = ab.clone_plane();
        for i in 0..sab.data.len() {
            sab.data[i] -= mu_a.data[i] * mu_b.data[i];
        }
        ScaleStats {
            kernel,
            mhat: mhat.clone_plane(),
            d,
            mu_a,
            mu_b,
            saa,
            sbb,
            sab,
        }
    }

    fn window_valid(&self, i: usize) -> bool {
        self.d.data[i] > WINDOW_MIN_WEIGHT
    }

    /// Mean contrast-structure term and, at the last scale, mean l*cs.
    fn means(&self, with_luminance: bool) -> (f64, f64) {
        let mut cs_sum = 0.0;
        let mut full_sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.d.data.len() {
            if !self.window_valid(i) {
                continue;
            }
            let cs = (2.0 * self.sab.data[i] + C2) / (self.saa.data[i] + self.sbb.data[i] + C2);
            cs_sum += cs;
            if with_luminance {
                let (ma, mb) = (self.mu_a.data[i], self.mu_b.data[i]);
                let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
                full_sum += l * cs;
            }
            n += 1;
        }
        if n == 0 {
            return (0.0, 0.0);
        }
        (cs_sum / n as f64, full_sum / n as f64)
    }

    /// Backpropagates gradients on the per-window mean statistics into pixel
    /// gradients for a and b. `g_cs_mean` applies to mean(cs); `g_full_mean`
    /// to mean(l*cs) (zero except at the last scale).
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        a: &Plane,
        b: &Plane,
        g_cs_mean: f64,
        g_full_mean: f64,
        ga_out: &mut Plane,
        gb_out: &mut Plane,
    ) {
        let nw = self.d.data.len();
        let n_valid = (0..nw).filter(|&i| self.window_valid(i)).count();
        if n_valid == 0 {
            return;
        }
        let inv_n = 1.0 / n_valid as f64;

        let mut g_mu_a = Plane::new(self.d.w, self.d.h);
        let mut g_mu_b = Plane::new(self.d.w, self.d.h);
        let mut g_saa = Plane::new(self.d.w, self.d.h);
        let mut g_sbb = Plane::new(self.d.w, self.d.h);
        let mut g_sab = Plane::new(self.d.w, self.d.h);

        for i in 0..nw {
            if !self.window_valid(i) {
                continue;
            }
            let (ma, mb) = (self.mu_a.data[i], self.mu_b.data[i]);
            let num_cs = 2.0 * self.sab.data[i] + C2;
            let den_cs = self.saa.data[i] + self.sbb.data[i] + C2;
            let cs = num_cs / den_cs;
            let mut g_cs = g_cs_mean * inv_n;
            if g_full_mean != 0.0 {
                let num_l = 2.0 * ma * mb + C1;
                let den_l = ma * ma + mb * mb + C1;
                let l = num_l / den_l;
                // d(l*cs) split into both factors.
                g_cs += g_full_mean * inv_n * l;
                let g_l = g_full_mean * inv_n * cs;
                let dl_dma = (2.0 * mb * den_l - num_l * 2.0 * ma) / (den_l * den_l);
                let dl_dmb = (2.0 * ma * den_l - num_l * 2.0 * mb) / (den_l * den_l);
                g_mu_a.data[i] += g_l * dl_dma;
                g_mu_b.data[i] += g_l * dl_dmb;
            }
            g_sab.data[i] += g_cs * 2.0 / den_cs;
            let d_den = -g_cs * num_cs / (den_cs * den_cs);
            g_saa.data[i] += d_den;
            g_sbb.data[i] += d_den;
        }

        // Variance/covariance terms feed back into the means.
        for i in 0..nw {
            g_mu_a.data[i] -=
                2.0 * self.mu_a.data[i] * g_saa.data[i] + self.mu_b.data[i] * g_sab.data[i];
            g_mu_b.data[i] -=
                2.0 * self.mu_b.data[i] * g_sbb.data[i] + self.mu_a.data[i] * g_sab.data[i];
        }

        // Adjoint of the masked-normalized window mean: x -> conv(mhat*x)/d.
        let wt = |g: &Plane, out_w: usize, out_h: usize| -> Plane {
            let scaled = g.zip(&self.d, |gv, dd| {
                if dd > WINDOW_MIN_WEIGHT {
                    gv / dd
                } else {
                    0.0
                }
            });
            let spread = conv_valid_adjoint(&scaled, &self.kernel, out_w, out_h);
            spread.zip(&self.mhat, |v, m| v * m)
        };

        let (w, h) = (a.w, a.h);
        // mu paths.
        let t = wt(&g_mu_a, w, h);
        for i in 0..t.data.len() {
            ga_out.data[i] += t.data[i];
        }
        let t = wt(&g_mu_b, w, h);
        for i in 0..t.data.len() {
            gb_out.data[i] += t.data[i];
        }
        // Second-moment paths: saa via conv(a^2), sab via conv(a*b).
        let t = wt(&g_saa, w, h);
        for i in 0..t.data.len() {
            ga_out.data[i] += t.data[i] * 2.0 * a.data[i];
        }
        let t = wt(&g_sbb, w, h);
        for i in 0..t.data.len() {
            gb_out.data[i] += t.data[i] * 2.0 * b.data[i];
        }
        let t = wt(&g_sab, w, h);
        for i in 0..t.data.len() {
            ga_out.data[i] += t.data[i] * b.data[i];
            gb_out.data[i] += t.data[i] * a.data[i];
        }
    }
}

impl Plane {
    fn clone_plane(&self) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.clone(),
        }
    }
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    a.expect_shape(b, "ms_ssim inputs")?;
    let side = a.width.min(a.height);
    if side < MIN_SIDE {
        return Err(Error::TooSmall {
            side,
            min: MIN_SIDE,
        });
    }
    Ok(())
}

fn scale_count(side: usize) -> usize {
    let mut n = 1;
    let mut s = side;
    while n < 5 && s / 2 >= MIN_SCALE_SIDE {
        s /= 2;
        n += 1;
    }
    n
}

fn window_for(side: usize) -> (usize, f64) {
    let win = if side >= 11 {
        11
    } else {
        let w = side.min(11);
        if w % 2 == 0 {
            w - 1
        } else {
            w
        }
    };
    (win, 1.5 * win as f64 / 11.0)
}

fn normalized_weights(n: usize) -> Vec<f64> {
    let sum: f64 = MSSSIM_WEIGHTS[..n].iter().sum();
    MSSSIM_WEIGHTS[..n].iter().map(|w| w / sum).collect()
}

/// Per-channel forward pass. Returns the per-scale stat caches, the clamped
/// per-scale means (cs for all but the last scale, l*cs at the last) and
/// the per-scale image pyramids.
struct ChannelForward {
    stats: Vec<ScaleStats>,
    means: Vec<f64>,
    pyr_a: Vec<Plane>,
    pyr_b: Vec<Plane>,
}

fn channel_forward(a0: Plane, b0: Plane, m0: Plane, n_scales: usize) -> ChannelForward {
    let mut stats = Vec::with_capacity(n_scales);
    let mut means = Vec::with_capacity(n_scales);
    let mut pyr_a = vec![a0];
    let mut pyr_b = vec![b0];
    let mut pyr_m = vec![m0];
    for s in 0..n_scales {
        let a = &pyr_a[s];
        let b = &pyr_b[s];
        let m = &pyr_m[s];
        let (win, sigma) = window_for(a.w.min(a.h));
        let st = ScaleStats::compute(a, b, m, gaussian_kernel(win, sigma));
        let last = s + 1 == n_scales;
        let (cs_mean, full_mean) = st.means(last);
        means.push(if last { full_mean } else { cs_mean }.max(CLAMP_EPS));
        stats.push(st);
        if !last {
            pyr_a.push(pyr_a[s].downsample2());
            pyr_b.push(pyr_b[s].downsample2());
            // Pooled validity re-binarized at one half.
            pyr_m.push(pyr_m[s].downsample2().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }));
        }
    }
    ChannelForward {
        stats,
        means,
        pyr_a,
        pyr_b,
    }
}

fn channel_score(means: &[f64], weights: &[f64]) -> f64 {
    means
        .iter()
        .zip(weights)
        .map(|(&m, &w)| m.powf(w))
        .product()
}

/// MS-SSIM in [0, 1]; 1 iff the (masked) images agree.
pub fn ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ms_ssim_impl(a, b, None).map(|(v, _, _)| v)
}

/// MS-SSIM plus gradients w.r.t. both images.
pub fn ms_ssim_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    ms_ssim_impl(a, b, None)
}

/// MS-SSIM restricted to windows whose validity (binarized at 0.5) is
/// nonempty; window weights renormalize over valid pixels.
pub fn ms_ssim_masked(a: &ImageBuffer, b: &ImageBuffer, valid: &ImageBuffer) -> Result<f64> {
    ms_ssim_impl(a, b, Some(valid)).map(|(v, _, _)| v)
}

pub fn ms_ssim_masked_grad(
    a: &ImageBuffer,
    b: &ImageBuffer,
    valid: &ImageBuffer,
) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    ms_ssim_impl(a, b, Some(valid))
}

fn ms_ssim_impl(
    a: &ImageBuffer,
    b: &ImageBuffer,
    valid: Option<&ImageBuffer>,
) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    check_pair(a, b)?;
    if let Some(v) = valid {
        if v.width != a.width || v.height != a.height || v.channels != 1 {
            return Err(Error::ShapeMismatch("validity mask shape".into()));
        }
    }
    let n_scales = scale_count(a.width.min(a.height));
    let weights = normalized_weights(n_scales);

    let m0 = match valid {
        Some(v) => Plane::from_channel(v, 0).map(|x| if x >= 0.5 { 1.0 } else { 0.0 }),
        None => Plane::new(a.width, a.height).map(|_| 1.0),
    };

    let mut score_sum = 0.0;
    let mut ga = ImageBuffer::new(a.width, a.height, a.channels);
    let mut gb = ImageBuffer::new(a.width, a.height, a.channels);
    let ch_norm = 1.0 / a.channels as f64;

    for c in 0..a.channels {
        let fwd = channel_forward(
            Plane::from_channel(a, c),
            Plane::from_channel(b, c),
            m0.clone_plane(),
            n_scales,
        );
        let score = channel_score(&fwd.means, &weights);
        score_sum += score;

        // d(score)/d(mean_s) = score * w_s / mean_s (means clamped >= eps).
        let mut g_a_scale: Vec<Plane> = fwd.pyr_a.iter().map(|p| Plane::new(p.w, p.h)).collect();
        let mut g_b_scale: Vec<Plane> = fwd.pyr_b.iter().map(|p| Plane::new(p.w, p.h)).collect();
        for s in 0..n_scales {
            let raw_mean_clamped = fwd.means[s];
            if raw_mean_clamped <= CLAMP_EPS {
                continue; // clamped: zero gradient
            }
            let g_mean = ch_norm * score * weights[s] / raw_mean_clamped;
            let last = s + 1 == n_scales;
            let (g_cs, g_full) = if last { (0.0, g_mean) } else { (g_mean, 0.0) };
            fwd.stats[s].backward(
                &fwd.pyr_a[s],
                &fwd.pyr_b[s],
                g_cs,
                g_full,
                &mut g_a_scale[s],
                &mut g_b_scale[s],
            );
        }
        // Collapse the pyramid: gradients at scale s+1 pool back to scale s.
        for s in (1..n_scales).rev() {
            let t = fwd.pyr_a[s - 1].downsample2_adjoint(&g_a_scale[s]);
            for i in 0..t.data.len() {
                g_a_scale[s - 1].data[i] += t.data[i];
            }
            let t = fwd.pyr_b[s - 1].downsample2_adjoint(&g_b_scale[s]);
            for i in 0..t.data.len() {
                g_b_scale[s - 1].data[i] += t.data[i];
            }
        }
        for y in 0..a.height {
            for x in 0..a.width {
                let i = ga.idx(x, y, c);
                ga.data[i] = g_a_scale[0].data[y * a.width + x];
                gb.data[i] = g_b_scale[0].data[y * a.width + x];
            }
        }
    }
    Ok((score_sum * ch_norm, ga, gb))
}

/// Mean single-scale SSIM (the classic index), exposed for closed-form checks.
pub fn ssim_single_scale(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.expect_shape(b, "ssim inputs")?;
    let side = a.width.min(a.height);
    if side < 11 {
        return Err(Error::TooSmall { side, min: 11 });
    }
    let m0 = Plane::new(a.width, a.height).map(|_| 1.0);
    let mut sum = 0.0;
    for c in 0..a.channels {
        let st = ScaleStats::compute(
            &Plane::from_channel(a, c),
            &Plane::from_channel(b, c),
            &m0,
            gaussian_kernel(11, 1.5),
        );
        let (_, full) = st.means(true);
        sum += full;
    }
    Ok(sum / a.channels as f64)
}

/// Perceptual distance proxy: (1 - MS-SSIM) plus an L1 penalty on
/// finite-difference gradients over a 3-level Gaussian pyramid. Symmetric,
/// zero iff the images match, differentiable in both.
pub fn perceptual_proxy(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    perceptual_proxy_grad(a, b).map(|(v, _, _)| v)
}

const PYRAMID_LEVELS: usize = 3;
const GRAD_WEIGHT: f64 = 1.0;
const PYRAMID_BLUR_SIGMA: f64 = 1.0;

pub fn perceptual_proxy_grad(
    a: &ImageBuffer,
    b: &ImageBuffer,
) -> Result<(f64, ImageBuffer, ImageBuffer)> {
    check_pair(a, b)?;
    if a.channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "perceptual proxy expects 3 channels, got {}",
            a.channels
        )));
    }
    let (ms, ms_ga, ms_gb) = ms_ssim_grad(a, b)?;
    let mut loss = 1.0 - ms;
    let mut ga = ms_ga.clone();
    let mut gb = ms_gb.clone();
    for v in &mut ga.data {
        *v = -*v;
    }
    for v in &mut gb.data {
        *v = -*v;
    }

    let mut pa = a.clone();
    let mut pb = b.clone();
    let mut chain_a: Vec<ImageBuffer> = Vec::new();
    let mut chain_b: Vec<ImageBuffer> = Vec::new();
    let mut grads_at_level: Vec<(ImageBuffer, ImageBuffer)> = Vec::new();
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            pa = pa.gaussian_blur(PYRAMID_BLUR_SIGMA).downsample2();
            pb = pb.gaussian_blur(PYRAMID_BLUR_SIGMA).downsample2();
        }
        chain_a.push(pa.clone());
        chain_b.push(pb.clone());
        let (l, la, lb) = gradient_l1(&pa, &pb);
        loss += GRAD_WEIGHT * l;
        grads_at_level.push((la, lb));
    }
    // Backprop pyramid levels to the full-resolution images.
    let mut acc_a = ImageBuffer::new(0, 0, 0);
    let mut acc_b = ImageBuffer::new(0, 0, 0);
    for level in (0..PYRAMID_LEVELS).rev() {
        let (mut la, mut lb) = grads_at_level[level].clone();
        for v in la.data.iter_mut().chain(lb.data.iter_mut()) {
            *v *= GRAD_WEIGHT;
        }
        if acc_a.width != 0 {
            for (o, v) in la.data.iter_mut().zip(&acc_a.data) {
                *o += v;
            }
            for (o, v) in lb.data.iter_mut().zip(&acc_b.data) {
                *o += v;
            }
        }
        if level > 0 {
            let src_a = &chain_a[level - 1];
            let src_b = &chain_b[level - 1];
            let blurred_a = src_a.gaussian_blur(PYRAMID_BLUR_SIGMA);
            acc_a = gaussian_blur_adjoint(&downsample2_adjoint_img(&blurred_a, &la), PYRAMID_BLUR_SIGMA);
            let _ = src_b;
            acc_b = gaussian_blur_adjoint(&downsample2_adjoint_img(&src_b.gaussian_blur(PYRAMID_BLUR_SIGMA), &lb), PYRAMID_BLUR_SIGMA);
        } else {
            for (o, v) in ga.data.iter_mut().zip(&la.data) {
                *o += v;
            }
            for (o, v) in gb.data.iter_mut().zip(&lb.data) {
                *o += v;
            }
        }
    }
    Ok((loss, ga, gb))
}

/// Mean L1 distance between forward-difference gradients of two images.
fn gradient_l1(a: &ImageBuffer, b: &ImageBuffer) -> (f64, ImageBuffer, ImageBuffer) {
    let mut ga = ImageBuffer::new(a.width, a.height, a.channels);
    let mut gb = ImageBuffer::new(a.width, a.height, a.channels);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..a.channels {
        for y in 0..a.height {
            for x in 0..a.width {
                if x + 1 < a.width {
                    let da = a.get(x + 1, y, c) - a.get(x, y, c);
                    let db = b.get(x + 1, y, c) - b.get(x, y, c);
                    let s = (da - db).signum();
                    sum += (da - db).abs();
                    n += 1;
                    let i0 = ga.idx(x, y, c);
                    let i1 = ga.idx(x + 1, y, c);
                    ga.data[i1] += s;
                    ga.data[i0] -= s;
                    gb.data[i1] -= s;
                    gb.data[i0] += s;
                }
                if y + 1 < a.height {
                    let da = a.get(x, y + 1, c) - a.get(x, y, c);
                    let db = b.get(x, y + 1, c) - b.get(x, y, c);
                    let s = (da - db).signum();
                    sum += (da - db).abs();
                    n += 1;
                    let i0 = ga.idx(x, y, c);
                    let i1 = ga.idx(x, y + 1, c);
                    ga.data[i1] += s;
                    ga.data[i0] -= s;
                    gb.data[i1] -= s;
                    gb.data[i0] += s;
                }
            }
        }
    }
    let norm = 1.0 / n.max(1) as f64;
    for v in ga.data.iter_mut().chain(gb.data.iter_mut()) {
        *v *= norm;
    }
    (sum * norm, ga, gb)
}

/// Adjoint of 2x2 average pooling at the image level.
fn downsample2_adjoint_img(src_shape: &ImageBuffer, grad: &ImageBuffer) -> ImageBuffer {
    let mut out = ImageBuffer::new(src_shape.width, src_shape.height, src_shape.channels);
    for y in 0..grad.height {
        for x in 0..grad.width {
            for c in 0..grad.channels {
                let g = grad.get(x, y, c) / 4.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let sx = (2 * x + dx).min(out.width - 1);
                        let sy = (2 * y + dy).min(out.height - 1);
                        let i = out.idx(sx, sy, c);
                        out.data[i] += g;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of the replicate-padded separable Gaussian blur.
fn gaussian_blur_adjoint(grad: &ImageBuffer, sigma: f64) -> ImageBuffer {
    if sigma <= 0.0 {
        return grad.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    // Forward: vertical pass after horizontal; adjoint runs them reversed,
    // scattering with clamped indices.
    let mut tmp = ImageBuffer::new(grad.width, grad.height, grad.channels);
    for y in 0..grad.height {
        for x in 0..grad.width {
            for c in 0..grad.channels {
                let g = grad.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                for (ki, w) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, grad.height as i64 - 1);
                    let i = tmp.idx(x, sy as usize, c);
                    tmp.data[i] += w * g;
                }
            }
        }
    }
    let mut out = ImageBuffer::new(grad.width, grad.height, grad.channels);
    for y in 0..grad.height {
        for x in 0..grad.width {
            for c in 0..grad.channels {
                let g = tmp.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                for (ki, w) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, grad.width as i64 - 1);
                    let i = out.idx(sx as usize, y, c);
                    out.data[i] += w * g;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, ch: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, ch);
        // Smooth random field: random low-res grid upsampled, plus mild noise.
        let gw = 6;
        let mut grid = vec![0.0; gw * gw * ch];
        for v in &mut grid {
            *v = rng.gen();
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let gx = (x as f64 / w as f64) * (gw - 1) as f64;
                    let gy = (y as f64 / h as f64) * (gw - 1) as f64;
                    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gw - 1));
                    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                    let v = grid[(y0 * gw + x0) * ch + c] * (1.0 - fx) * (1.0 - fy)
                        + grid[(y0 * gw + x1) * ch + c] * fx * (1.0 - fy)
                        + grid[(y1 * gw + x0) * ch + c] * (1.0 - fx) * fy
                        + grid[(y1 * gw + x1) * ch + c] * fx * fy;
                    img.set(x, y, c, (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 64, 64, 3);
        let v = ms_ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "score {v}");
    }

    #[test]
    fn inverted_checkerboard_scores_low() {
        let mut a = ImageBuffer::new(64, 64, 1);
        for y in 0..64 {
            for x in 0..64 {
                a.set(x, y, 0, if (x / 4 + y / 4) % 2 == 0 { 1.0 } else { 0.0 });
            }
        }
        let mut b = a.clone();
        for v in &mut b.data {
            *v = 1.0 - *v;
        }
        let v = ms_ssim(&a, &b).unwrap();
        assert!(v < 0.2, "score {v}");
    }

    #[test]
    fn constant_images_match_closed_form() {
        let (c1v, c2v) = (0.3, 0.7);
        let a = ImageBuffer::filled(32, 32, 1, c1v);
        let b = ImageBuffer::filled(32, 32, 1, c2v);
        let got = ssim_single_scale(&a, &b).unwrap();
        let expect = (2.0 * c1v * c2v + C1) * C2 / ((c1v * c1v + c2v * c2v + C1) * C2);
        assert!((got - expect).abs() < 1e-12, "got {got} expect {expect}");
    }

    #[test]
    fn too_small_errors() {
        let a = ImageBuffer::new(16, 16, 1);
        assert!(matches!(ms_ssim(&a, &a), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 32, 32, 1);
        let b = random_image(&mut rng, 32, 32, 1);
        let (_, ga, gb) = ms_ssim_grad(&a, &b).unwrap();
        let h = 1e-5;
        for _ in 0..30 {
            let i = rng.gen_range(0..a.data.len());
            let mut ap = a.clone();
            ap.data[i] += h;
            let fp = ms_ssim(&ap, &b).unwrap();
            ap.data[i] -= 2.0 * h;
            let fm = ms_ssim(&ap, &b).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - ga.data[i]).abs();
            assert!(
                err < 1e-3 * fd.abs().max(ga.data[i].abs()) + 1e-8,
                "a[{i}]: fd={fd} grad={}",
                ga.data[i]
            );
            let mut bp = b.clone();
            bp.data[i] += h;
            let fp = ms_ssim(&a, &bp).unwrap();
            bp.data[i] -= 2.0 * h;
            let fm = ms_ssim(&a, &bp).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - gb.data[i]).abs();
            assert!(
                err < 1e-3 * fd.abs().max(gb.data[i].abs()) + 1e-8,
                "b[{i}]: fd={fd} grad={}",
                gb.data[i]
            );
        }
    }

    #[test]
    fn masked_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(&mut rng, 32, 32, 1);
        let b = random_image(&mut rng, 32, 32, 1);
        let mut valid = ImageBuffer::filled(32, 32, 1, 1.0);
        for y in 0..32 {
            for x in 0..32 {
                if (x as i64 - 16).pow(2) + (y as i64 - 16).pow(2) > 180 {
                    valid.set(x, y, 0, 0.0);
                }
            }
        }
        let (_, ga, _) = ms_ssim_masked_grad(&a, &b, &valid).unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..a.data.len());
            let mut ap = a.clone();
            ap.data[i] += h;
            let fp = ms_ssim_masked(&ap, &b, &valid).unwrap();
            ap.data[i] -= 2.0 * h;
            let fm = ms_ssim_masked(&ap, &b, &valid).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - ga.data[i]).abs();
            assert!(
                err < 1e-3 * fd.abs().max(ga.data[i].abs()) + 1e-8,
                "a[{i}]: fd={fd} grad={}",
                ga.data[i]
            );
        }
    }

    #[test]
    fn masked_ignores_invalid_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 32, 32, 1);
        let mut b = a.clone();
        let mut valid = ImageBuffer::filled(32, 32, 1, 1.0);
        // Corrupt a corner and mark it invalid: score must stay 1.
        for y in 0..8 {
            for x in 0..8 {
                b.set(x, y, 0, rng.gen());
                valid.set(x, y, 0, 0.0);
            }
        }
        let v = ms_ssim_masked(&a, &b, &valid).unwrap();
        assert!(v > 0.999, "masked score {v}");
        let unmasked = ms_ssim(&a, &b).unwrap();
        assert!(unmasked < v);
    }

    #[test]
    fn perceptual_proxy_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(&mut rng, 32, 32, 3);
        let b = random_image(&mut rng, 32, 32, 3);
        assert!(perceptual_proxy(&a, &a).unwrap().abs() < 1e-12);
        let ab = perceptual_proxy(&a, &b).unwrap();
        let ba = perceptual_proxy(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn perceptual_proxy_monotone_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 32, 32, 3);
        let mut wins = 0;
        for _ in 0..20 {
            let mut small = a.clone();
            let mut large = a.clone();
            for i in 0..a.data.len() {
                let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0f64), rng.gen());
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                small.data[i] = (a.data[i] + 0.01 * z).clamp(0.0, 1.0);
                large.data[i] = (a.data[i] + 0.1 * z).clamp(0.0, 1.0);
            }
            let ls = perceptual_proxy(&a, &small).unwrap();
            let ll = perceptual_proxy(&a, &large).unwrap();
            if ll > ls {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn perceptual_proxy_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_image(&mut rng, 32, 32, 3);
        let b = random_image(&mut rng, 32, 32, 3);
        let (_, ga, _) = perceptual_proxy_grad(&a, &b).unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..a.data.len());
            let mut ap = a.clone();
            ap.data[i] += h;
            let fp = perceptual_proxy(&ap, &b).unwrap();
            ap.data[i] -= 2.0 * h;
            let fm = perceptual_proxy(&ap, &b).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - ga.data[i]).abs();
            assert!(
                err < 2e-3 * fd.abs().max(ga.data[i].abs()) + 1e-7,
                "a[{i}]: fd={fd} grad={}",
                ga.data[i]
            );
        }
    }
}
