//! The intermediate representation `h`, the mapping from poses to it, and a
//! small fully differentiable estimator standing in for a CNN backbone.
//!
//! Two representation kinds are supported: sparse projected bounding-box
//! corners (8 pixels in canonical corner order) and a dense per-pixel
//! object-coordinate map (normalized by the mesh AABB) with a soft mask.

use crate::error::{Error, Result};
use crate::geometry::{bbox_corners, project, Intrinsics, Pose, TriangleMesh};
use crate::pnp::Correspondences;
use crate::renderer::{denormalize_coordinate, render_object_coordinates, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepKind {
    Sparse,
    Dense,
}

impl std::str::FromStr for RepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(RepKind::Sparse),
            "dense" => Ok(RepKind::Dense),
            other => Err(Error::Config(format!("unknown representation kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Representation {
    /// 8 projected bounding-box corners, canonical (sign_x, sign_y, sign_z) order.
    Sparse { points: Vec<nalgebra::Vector2<f64>> },
    /// Per-pixel normalized object coordinates plus mask in [0,1].
    Dense { coords: ImageBuffer, mask: ImageBuffer },
}

impl Representation {
    pub fn kind(&self) -> RepKind {
        match self {
            Representation::Sparse { .. } => RepKind::Sparse,
            Representation::Dense { .. } => RepKind::Dense,
        }
    }
}

/// Cotangent matching a `Representation`'s shape.
#[derive(Debug, Clone)]
pub enum RepCotangent {
    Sparse { points: Vec<nalgebra::Vector2<f64>> },
    Dense { coords: ImageBuffer, mask: ImageBuffer },
}

impl RepCotangent {
    pub fn zeros_like(h: &Representation) -> Self {
        match h {
            Representation::Sparse { points } => RepCotangent::Sparse {
                points: vec![nalgebra::Vector2::zeros(); points.len()],
            },
            Representation::Dense { coords, mask } => RepCotangent::Dense {
                coords: ImageBuffer::new(coords.width, coords.height, coords.channels),
                mask: ImageBuffer::new(mask.width, mask.height, mask.channels),
            },
        }
    }
}

/// Maps a pose to the intermediate representation for a given model and camera.
pub fn pi_map(
    pose: &Pose,
    mesh: &TriangleMesh,
    k: &Intrinsics,
    kind: RepKind,
) -> Result<Representation> {
    match kind {
        RepKind::Sparse => {
            let corners = bbox_corners(mesh)?;
            let points = project(pose, &corners, k)?;
            Ok(Representation::Sparse { points })
        }
        RepKind::Dense => {
            let (coords, mask) = render_object_coordinates(pose, mesh, k)?;
            Ok(Representation::Dense { coords, mask })
        }
    }
}

/// Cap on dense correspondences; beyond it pixels are kept at a fixed stride.
pub const MAX_DENSE_CORRESPONDENCES: usize = 500;

/// Where each correspondence came from in the representation, for routing
/// gradients back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrSource {
    /// Sparse corner index.
    Sparse(usize),
    /// Dense map pixel.
    Dense { x: usize, y: usize },
}

/// Adapter from a representation to PnP input.
///
/// Sparse: the 8 AABB corners paired with the predicted pixels, unit weights.
/// Dense: every pixel with mask >= 0.5 contributes (denormalized coordinate,
/// pixel center, weight = mask), deterministically subsampled to at most
/// `MAX_DENSE_CORRESPONDENCES`.
pub fn to_correspondences(h: &Representation, mesh: &TriangleMesh) -> Result<Correspondences> {
    to_correspondences_indexed(h, mesh).map(|(c, _)| c)
}

/// `to_correspondences` plus the source slot of every correspondence.
pub fn to_correspondences_indexed(
    h: &Representation,
    mesh: &TriangleMesh,
) -> Result<(Correspondences, Vec<CorrSource>)> {
    match h {
        Representation::Sparse { points } => {
            if points.len() != 8 {
                return Err(Error::ShapeMismatch(format!(
                    "sparse representation has {} points, expected 8",
                    points.len()
                )));
            }
            let corners = bbox_corners(mesh)?.to_vec();
            let c = Correspondences::new(corners, points.clone(), vec![1.0; 8])?;
            Ok((c, (0..8).map(CorrSource::Sparse).collect()))
        }
        Representation::Dense { coords, mask } => {
            coords.expect_shape(
                &ImageBuffer::new(mask.width, mask.height, 3),
                "dense coords vs mask",
            )?;
            let mut hits = Vec::new();
            for y in 0..mask.height {
                for x in 0..mask.width {
                    if mask.get(x, y, 0) >= 0.5 {
                        hits.push((x, y));
                    }
                }
            }
            if hits.len() < 4 {
                return Err(Error::TooFewPoints {
                    got: hits.len(),
                    min: 4,
                });
            }
            let stride = hits.len().div_ceil(MAX_DENSE_CORRESPONDENCES).max(1);
            let mut p3 = Vec::new();
            let mut p2 = Vec::new();
            let mut w = Vec::new();
            let mut src = Vec::new();
            for (x, y) in hits.into_iter().step_by(stride) {
                let c = [coords.get(x, y, 0), coords.get(x, y, 1), coords.get(x, y, 2)];
                p3.push(denormalize_coordinate(mesh, c));
                p2.push(nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
                w.push(mask.get(x, y, 0));
                src.push(CorrSource::Dense { x, y });
            }
            let c = Correspondences::new(p3, p2, w)?;
            Ok((c, src))
        }
    }
}

/// Architecture of the toy estimator: a two-hidden-layer dense network over
/// average-pooled pixels, with a sparse (16 corner coordinates) or dense
/// (coarse coordinate+mask grid, bilinearly upsampled) head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub kind: RepKind,
    /// Square input side in pixels; crops are resized to this.
    pub input_size: usize,
    /// Average-pool factor applied before flattening.
    pub pool: usize,
    pub hidden: usize,
    /// Dense head grid side before upsampling.
    pub dense_grid: usize,
    /// Seed of the uniform +-1/sqrt(fan_in) initialization.
    pub init_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: RepKind::Sparse,
            input_size: 64,
            pool: 4,
            hidden: 256,
            dense_grid: 16,
            init_seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn trunk_input_dim(&self) -> usize {
        let side = self.input_size / self.pool;
        side * side * 3
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            RepKind::Sparse => 16,
            RepKind::Dense => self.dense_grid * self.dense_grid * 4,
        }
    }

    fn layout(&self) -> Layout {
        let input = self.trunk_input_dim();
        let h = self.hidden;
        let out = self.output_dim();
        let w1 = 0;
        let b1 = w1 + h * input;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + out * h;
        Layout {
            input,
            hidden: h,
            out,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: b3 + out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Index range of the first layer (frozen during synthetic pretraining).
    pub fn first_layer_range(&self) -> std::ops::Range<usize> {
        let l = self.layout();
        l.w1..l.w2
    }
}

struct Layout {
    input: usize,
    hidden: usize,
    out: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

/// Flat parameter vector plus the architecture metadata.
#[derive(Debug, Clone)]
pub struct EstimatorParams {
    pub config: EstimatorConfig,
    pub data: Vec<f64>,
}

impl EstimatorParams {
    /// Uniform +-1/sqrt(fan_in) initialization from the config seed.
    pub fn init(config: EstimatorConfig) -> Self {
        let l = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut data = vec![0.0; l.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, data: &mut Vec<f64>| {
            let b = 1.0 / (fan_in as f64).sqrt();
            for i in range {
                data[i] = rng.gen_range(-b..b);
            }
        };
        fill(l.w1..l.b1 + l.hidden, l.input, &mut data);
        fill(l.w2..l.b2 + l.hidden, l.hidden, &mut data);
        fill(l.w3..l.b3 + l.out, l.hidden, &mut data);
        Self { config, data }
    }

    pub fn zeros(config: EstimatorConfig) -> Self {
        let n = config.param_count();
        Self {
            config,
            data: vec![0.0; n],
        }
    }
}

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

fn check_input(config: &EstimatorConfig, image: &ImageBuffer) -> Result<()> {
    if image.width != config.input_size || image.height != config.input_size || image.channels != 3
    {
        return Err(Error::ShapeMismatch(format!(
            "estimator input {}x{}x{}, configured {}x{}x3",
            image.width, image.height, image.channels, config.input_size, config.input_size
        )));
    }
    Ok(())
}

/// Pooled, centered trunk input.
fn pool_input(config: &EstimatorConfig, image: &ImageBuffer) -> Vec<f64> {
    let p = config.pool;
    let side = config.input_size / p;
    let mut x = vec![0.0; side * side * 3];
    let norm = 1.0 / (p * p) as f64;
    for by in 0..side {
        for bx in 0..side {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        s += image.get(bx * p + dx, by * p + dy, c);
                    }
                }
                x[(by * side + bx) * 3 + c] = (s * norm - 0.5) * 2.0;
            }
        }
    }
    x
}

struct ForwardState {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    o: Vec<f64>,
}

fn forward_trunk(params: &EstimatorParams, image: &ImageBuffer) -> ForwardState {
    let l = params.config.layout();
    let th = &params.data;
    let x = pool_input(&params.config, image);
    let mut z1 = vec![0.0; l.hidden];
    for i in 0..l.hidden {
        let mut s = th[l.b1 + i];
        let row = l.w1 + i * l.input;
        for j in 0..l.input {
            s += th[row + j] * x[j];
        }
        z1[i] = s;
    }
    let a1: Vec<f64> = z1.iter().map(|&z| softplus(z)).collect();
    let mut z2 = vec![0.0; l.hidden];
    for i in 0..l.hidden {
        let mut s = th[l.b2 + i];
        let row = l.w2 + i * l.hidden;
        for j in 0..l.hidden {
            s += th[row + j] * a1[j];
        }
        z2[i] = s;
    }
    let a2: Vec<f64> = z2.iter().map(|&z| softplus(z)).collect();
    let mut o = vec![0.0; l.out];
    for i in 0..l.out {
        let mut s = th[l.b3 + i];
        let row = l.w3 + i * l.hidden;
        for j in 0..l.hidden {
            s += th[row + j] * a2[j];
        }
        o[i] = s;
    }
    ForwardState { x, z1, a1, z2, a2, o }
}

/// Bilinear upsample of a `grid x grid x ch` field to `size x size x ch`,
/// sampling grid cell centers with edge clamping.
fn upsample_grid(grid: &[f64], g: usize, ch: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size * ch];
    let scale = g as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let gx = (x as f64 + 0.5) * scale - 0.5;
            let gy = (y as f64 + 0.5) * scale - 0.5;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let fx = gx - x0;
            let fy = gy - y0;
            let cl = |v: i64| v.clamp(0, g as i64 - 1) as usize;
            let (x0i, x1i) = (cl(x0 as i64), cl(x0 as i64 + 1));
            let (y0i, y1i) = (cl(y0 as i64), cl(y0 as i64 + 1));
            for c in 0..ch {
                let v = grid[(y0i * g + x0i) * ch + c] * (1.0 - fx) * (1.0 - fy)
                    + grid[(y0i * g + x1i) * ch + c] * fx * (1.0 - fy)
                    + grid[(y1i * g + x0i) * ch + c] * (1.0 - fx) * fy
                    + grid[(y1i * g + x1i) * ch + c] * fx * fy;
                out[(y * size + x) * ch + c] = v;
            }
        }
    }
    out
}

/// Adjoint of `upsample_grid`.
fn upsample_grid_adjoint(cot: &[f64], g: usize, ch: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; g * g * ch];
    let scale = g as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let gx = (x as f64 + 0.5) * scale - 0.5;
            let gy = (y as f64 + 0.5) * scale - 0.5;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let fx = gx - x0;
            let fy = gy - y0;
            let cl = |v: i64| v.clamp(0, g as i64 - 1) as usize;
            let (x0i, x1i) = (cl(x0 as i64), cl(x0 as i64 + 1));
            let (y0i, y1i) = (cl(y0 as i64), cl(y0 as i64 + 1));
            for c in 0..ch {
                let gv = cot[(y * size + x) * ch + c];
                out[(y0i * g + x0i) * ch + c] += gv * (1.0 - fx) * (1.0 - fy);
                out[(y0i * g + x1i) * ch + c] += gv * fx * (1.0 - fy);
                out[(y1i * g + x0i) * ch + c] += gv * (1.0 - fx) * fy;
                out[(y1i * g + x1i) * ch + c] += gv * fx * fy;
            }
        }
    }
    out
}

fn head(params: &EstimatorParams, o: &[f64]) -> Representation {
    let cfg = &params.config;
    let size = cfg.input_size as f64;
    match cfg.kind {
        RepKind::Sparse => {
            let points = (0..8)
                .map(|i| {
                    nalgebra::Vector2::new(sigmoid(o[2 * i]) * size, sigmoid(o[2 * i + 1]) * size)
                })
                .collect();
            Representation::Sparse { points }
        }
        RepKind::Dense => {
            let g = cfg.dense_grid;
            let act: Vec<f64> = o.iter().map(|&v| sigmoid(v)).collect();
            let up = upsample_grid(&act, g, 4, cfg.input_size);
            let n = cfg.input_size;
            let mut coords = ImageBuffer::new(n, n, 3);
            let mut mask = ImageBuffer::new(n, n, 1);
            for i in 0..n * n {
                for c in 0..3 {
                    coords.data[i * 3 + c] = up[i * 4 + c];
                }
                mask.data[i] = up[i * 4 + 3];
            }
            Representation::Dense { coords, mask }
        }
    }
}

/// Runs the estimator. Deterministic; differentiable w.r.t. both the
/// parameters and the input image.
pub fn estimator_forward(params: &EstimatorParams, image: &ImageBuffer) -> Result<Representation> {
    check_input(&params.config, image)?;
    let st = forward_trunk(params, image);
    Ok(head(params, &st.o))
}

/// Exact reverse-mode gradient of `estimator_forward`: returns the gradient
/// w.r.t. the flat parameter vector and w.r.t. the input image.
pub fn estimator_backward(
    params: &EstimatorParams,
    image: &ImageBuffer,
    upstream: &RepCotangent,
) -> Result<(Vec<f64>, ImageBuffer)> {
    check_input(&params.config, image)?;
    let cfg = &params.config;
    let l = cfg.layout();
    let st = forward_trunk(params, image);

    // Head backward: cotangent on the pre-activation vector o.
    let mut g_o = vec![0.0; l.out];
    match (cfg.kind, upstream) {
        (RepKind::Sparse, RepCotangent::Sparse { points }) => {
            if points.len() != 8 {
                return Err(Error::ShapeMismatch("sparse cotangent needs 8 points".into()));
            }
            let size = cfg.input_size as f64;
            for i in 0..8 {
                let su = sigmoid(st.o[2 * i]);
                let sv = sigmoid(st.o[2 * i + 1]);
                g_o[2 * i] = points[i].x * size * su * (1.0 - su);
                g_o[2 * i + 1] = points[i].y * size * sv * (1.0 - sv);
            }
        }
        (RepKind::Dense, RepCotangent::Dense { coords, mask }) => {
            let n = cfg.input_size;
            if coords.width != n || mask.width != n {
                return Err(Error::ShapeMismatch("dense cotangent size".into()));
            }
            let mut up_cot = vec![0.0; n * n * 4];
            for i in 0..n * n {
                for c in 0..3 {
                    up_cot[i * 4 + c] = coords.data[i * 3 + c];
                }
                up_cot[i * 4 + 3] = mask.data[i];
            }
            let g_act = upsample_grid_adjoint(&up_cot, cfg.dense_grid, 4, n);
            for i in 0..l.out {
                let s = sigmoid(st.o[i]);
                g_o[i] = g_act[i] * s * (1.0 - s);
            }
        }
        _ => return Err(Error::KindMismatch),
    }

    let th = &params.data;
    let mut g = vec![0.0; l.total];

    // Layer 3.
    let mut g_a2 = vec![0.0; l.hidden];
    for i in 0..l.out {
        let gi = g_o[i];
        if gi == 0.0 {
            continue;
        }
        g[l.b3 + i] += gi;
        let row = l.w3 + i * l.hidden;
        for j in 0..l.hidden {
            g[row + j] += gi * st.a2[j];
            g_a2[j] += gi * th[row + j];
        }
    }
    // Layer 2.
    let mut g_a1 = vec![0.0; l.hidden];
    for i in 0..l.hidden {
        let gz = g_a2[i] * sigmoid(st.z2[i]);
        if gz == 0.0 {
            continue;
        }
        g[l.b2 + i] += gz;
        let row = l.w2 + i * l.hidden;
        for j in 0..l.hidden {
            g[row + j] += gz * st.a1[j];
            g_a1[j] += gz * th[row + j];
        }
    }
    // Layer 1.
    let mut g_x = vec![0.0; l.input];
    for i in 0..l.hidden {
        let gz = g_a1[i] * sigmoid(st.z1[i]);
        if gz == 0.0 {
            continue;
        }
        g[l.b1 + i] += gz;
        let row = l.w1 + i * l.input;
        for j in 0..l.input {
            g[row + j] += gz * st.x[j];
            g_x[j] += gz * th[row + j];
        }
    }

    // Pooling + centering adjoint back to the image.
    let p = cfg.pool;
    let side = cfg.input_size / p;
    let mut g_img = ImageBuffer::new(cfg.input_size, cfg.input_size, 3);
    let norm = 2.0 / (p * p) as f64;
    for by in 0..side {
        for bx in 0..side {
            for c in 0..3 {
                let gv = g_x[(by * side + bx) * 3 + c] * norm;
                if gv == 0.0 {
                    continue;
                }
                for dy in 0..p {
                    for dx in 0..p {
                        let i = g_img.idx(bx * p + dx, by * p + dy, c);
                        g_img.data[i] += gv;
                    }
                }
            }
        }
    }
    Ok((g, g_img))
}

/// Writes theta as a PSKF flat vector plus a text sidecar with layer sizes.
pub fn save_params(params: &EstimatorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::renderer::io::write_pskf_vector(&params.data, path)?;
    let meta = path.with_extension("meta");
    let cfg = &params.config;
    let text = format!(
        "kind = {}\ninput_size = {}\npool = {}\nhidden = {}\ndense_grid = {}\ninit_seed = {}\nparams = {}\nlayers = {}x{} {}x{} {}x{}\n",
        match cfg.kind {
            RepKind::Sparse => "sparse",
            RepKind::Dense => "dense",
        },
        cfg.input_size,
        cfg.pool,
        cfg.hidden,
        cfg.dense_grid,
        cfg.init_seed,
        params.data.len(),
        cfg.hidden,
        cfg.trunk_input_dim(),
        cfg.hidden,
        cfg.hidden,
        cfg.output_dim(),
        cfg.hidden,
    );
    std::fs::write(&meta, text).map_err(|e| Error::io(meta.display().to_string(), e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<EstimatorParams> {
    let path = path.as_ref();
    let meta_path = path.with_extension("meta");
    let meta = std::fs::read_to_string(&meta_path)
        .map_err(|_| Error::MissingCheckpoint(meta_path.display().to_string()))?;
    let mut cfg = EstimatorConfig::default();
    let mut expect_len = None;
    for line in meta.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "kind" => cfg.kind = value.parse()?,
            "input_size" => cfg.input_size = parse_meta(key, value)?,
            "pool" => cfg.pool = parse_meta(key, value)?,
            "hidden" => cfg.hidden = parse_meta(key, value)?,
            "dense_grid" => cfg.dense_grid = parse_meta(key, value)?,
            "init_seed" => cfg.init_seed = parse_meta(key, value)?,
            "params" => expect_len = Some(parse_meta::<usize>(key, value)?),
            _ => {}
        }
    }
    let data = crate::renderer::io::read_pskf_vector(path)?;
    if let Some(n) = expect_len {
        if n != data.len() || n != cfg.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} params, metadata says {n}, config needs {}",
                data.len(),
                cfg.param_count()
            )));
        }
    }
    Ok(EstimatorParams { config: cfg, data })
}

fn parse_meta<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad checkpoint metadata {key} = {value}")))
}
