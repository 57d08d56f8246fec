//! Ray sampling and volume compositing.
//!
//! For samples at distances `d_1 < ... < d_K` with the closing boundary
//! `d_{K+1} = far`, segment transmittance is `ω_k = exp(−σ_k (d_{k+1} − d_k))`,
//! accumulated transmittance `T_k = ∏_{i<k} ω_i`, and the sample weight
//! `w_k = T_k (1 − ω_k)`. The ray color is `Σ w_k c_k`, and the background is
//! blended with the residual transmittance `T_{K+1} = 1 − Σ w_k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Tape, Var};
use crate::error::{usage, validation, Result};
use crate::field::{encode_batch, field_forward, FieldArch, FieldParams};
use crate::geometry::{Camera, Ray, SyntheticScene, Vec3};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// One uniform draw inside each of `K` equal-width bins.
    Stratified,
    /// `K` evenly spaced samples including both endpoints.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples: usize,
    pub strategy: SamplingStrategy,
    pub background: Vec3,
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 192,
            strategy: SamplingStrategy::Stratified,
            background: [0.0; 3],
            near: 2.0,
            far: 6.0,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(validation("render.samples must be at least 2"));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(validation("render bounds need near < far"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(validation("background color must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Deterministic jitter stream for one ray: a function of `(seed, ray_id)` only.
pub fn ray_rng(seed: u64, ray_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray_id);
    rng
}

/// Sample distances along one ray.
pub fn sample_distances(
    near: f64,
    far: f64,
    k: usize,
    strategy: SamplingStrategy,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(near < far) {
        return Err(usage(format!("need near < far, got {near} and {far}")));
    }
    if k < 2 {
        return Err(usage("need at least two samples per ray"));
    }
    let span = far - near;
    Ok(match strategy {
        SamplingStrategy::Uniform => (0..k)
            .map(|i| near + i as f64 / (k - 1) as f64 * span)
            .collect(),
        SamplingStrategy::Stratified => {
            let bin = span / k as f64;
            (0..k)
                .map(|i| near + (i as f64 + rng.random::<f64>()) * bin)
                .collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    /// `Σ w_k c_k` before the background blend.
    pub color: Vec3,
    pub omega: Vec<f64>,
    /// `T_1 ..= T_{K+1}`.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    /// `color + T_{K+1} · background`.
    pub pixel: Vec3,
}

/// Composites one ray. `boundaries` holds `K + 1` nondecreasing distances.
pub fn composite(
    sigmas: &[f64],
    colors: &[Vec3],
    boundaries: &[f64],
    background: Vec3,
) -> Result<CompositeResult> {
    let k = sigmas.len();
    if colors.len() != k || boundaries.len() != k + 1 {
        return Err(usage("composite needs K sigmas, K colors and K + 1 boundaries"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(usage(format!("densities must be nonnegative, got {s}")));
    }
    if boundaries.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(usage("sample boundaries must be nondecreasing"));
    }
    let mut omega = Vec::with_capacity(k);
    let mut transmittance = Vec::with_capacity(k + 1);
    let mut weights = Vec::with_capacity(k);
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for i in 0..k {
        let w = (-sigmas[i] * (boundaries[i + 1] - boundaries[i])).exp();
        transmittance.push(t);
        omega.push(w);
        let wk = t * (1.0 - w);
        weights.push(wk);
        for c in 0..3 {
            color[c] += wk * colors[i][c];
        }
        t *= w;
    }
    transmittance.push(t);
    let pixel = [
        color[0] + t * background[0],
        color[1] + t * background[1],
        color[2] + t * background[2],
    ];
    Ok(CompositeResult {
        color,
        omega,
        transmittance,
        weights,
        pixel,
    })
}

/// Pixel rectangle `[x0, x0 + width) × [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x0 + self.width > width || self.y0 + self.height > height {
            return Err(usage(format!("rect {self:?} outside the {width}x{height} image")));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Disjoint tiles of at most `tile × tile` pixels covering the rect, row-major.
    pub fn tiles(&self, tile: usize) -> Vec<Rect> {
        let tile = tile.max(1);
        let mut out = Vec::new();
        let mut y = self.y0;
        while y < self.y0 + self.height {
            let h = tile.min(self.y0 + self.height - y);
            let mut x = self.x0;
            while x < self.x0 + self.width {
                let w = tile.min(self.x0 + self.width - x);
                out.push(Rect { x0: x, y0: y, width: w, height: h });
                x += w;
            }
            y += h;
        }
        out
    }
}

/// Sample positions for a set of rays: everything about rendering that does
/// not depend on the field.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples: usize,
    /// `[R * K]` sample points.
    pub points: Vec<Vec3>,
    /// `[R * K]` view directions.
    pub dirs: Vec<Vec3>,
    /// `[R, K]` segment lengths `d_{k+1} − d_k`.
    pub deltas: Tensor,
    /// `[R, K]` segment midpoints.
    pub midpoints: Tensor,
}

impl RayBatch {
    /// `ids[r]` keys the jitter stream of ray `r`.
    pub fn new(rays: Vec<Ray>, ids: &[u64], config: &RenderConfig) -> Result<Self> {
        config.validate()?;
        let k = config.samples;
        let r = rays.len();
        let mut points = Vec::with_capacity(r * k);
        let mut dirs = Vec::with_capacity(r * k);
        let mut deltas = Vec::with_capacity(r * k);
        let mut mids = Vec::with_capacity(r * k);
        for (ray, &id) in rays.iter().zip(ids) {
            let mut rng = ray_rng(config.seed, id);
            let d = sample_distances(config.near, config.far, k, config.strategy, &mut rng)?;
            for i in 0..k {
                let next = if i + 1 < k { d[i + 1] } else { config.far };
                points.push(ray.at(d[i]));
                dirs.push(ray.direction);
                deltas.push(next - d[i]);
                mids.push(0.5 * (d[i] + next));
            }
        }
        Ok(Self {
            rays,
            samples: k,
            points,
            dirs,
            deltas: Tensor::new(vec![r, k], deltas),
            midpoints: Tensor::new(vec![r, k], mids),
        })
    }

    /// Rays of the pixels in `rect`, row-major; jitter keyed by the global
    /// pixel index so any sub-rectangle reproduces the full image.
    pub fn for_rect(camera: &Camera, rect: Rect, config: &RenderConfig) -> Result<Self> {
        rect.check_within(camera.width(), camera.height())?;
        let mut rays = Vec::with_capacity(rect.pixel_count());
        let mut ids = Vec::with_capacity(rect.pixel_count());
        for y in rect.y0..rect.y0 + rect.height {
            for x in rect.x0..rect.x0 + rect.width {
                rays.push(camera.pixel_ray(x, y));
                ids.push((y * camera.width() + x) as u64);
            }
        }
        Self::new(rays, &ids, config)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Composited rays on some backend.
pub struct Composited<V> {
    /// `[R, 3]` final pixel colors.
    pub pixels: V,
    /// `[R, K]` sample weights.
    pub weights: V,
}

/// Batched compositing of `sigma: [R*K]` and `colors: [R*K, 3]`.
pub fn composite_batch<B: Backend>(
    b: &B,
    sigma: &B::Value,
    colors: &B::Value,
    batch: &RayBatch,
    background: Vec3,
) -> Composited<B::Value> {
    let (r, k) = (batch.len(), batch.samples);
    let sigma = b.reshape(sigma, &[r, k]);
    let deltas = b.constant(batch.deltas.clone());
    let omega = b.exp(&b.scale(&b.mul(&sigma, &deltas), -1.0));
    let trans = b.excl_cumprod(&omega);
    let alpha = b.offset(&b.scale(&omega, -1.0), 1.0);
    let weights = b.mul(&trans, &alpha);
    let color = b.ray_sum(&weights, colors);
    let residual = b.offset(&b.scale(&b.sum_last(&weights), -1.0), 1.0);
    let bg = b.constant(Tensor::new(vec![1, 3], background.to_vec()));
    let bg_term = b.matmul(&b.reshape(&residual, &[r, 1]), &bg);
    Composited {
        pixels: b.add(&color, &bg_term),
        weights,
    }
}

/// Renders a batch through the MLP field on any backend.
pub fn render_rays<B: Backend>(
    b: &B,
    params: &[B::Value],
    arch: &FieldArch,
    batch: &RayBatch,
    background: Vec3,
) -> Composited<B::Value> {
    let pos = b.constant(encode_batch(&batch.points, arch.pe_levels_pos));
    let dir = b.constant(encode_batch(&batch.dirs, arch.pe_levels_dir));
    let (sigma, colors) = field_forward(b, params, arch, &pos, &dir);
    composite_batch(b, &sigma, &colors, batch, background)
}

/// Anything that can report density and color at sample points.
pub trait RadianceField {
    /// Densities `[N]` and colors `[N, 3]` for the batch's sample points.
    fn query(&self, batch: &RayBatch) -> Result<(Tensor, Tensor)>;
}

/// The MLP field evaluated without gradient tracking.
#[derive(Debug, Clone, Copy)]
pub struct MlpField<'a> {
    pub params: &'a FieldParams,
    pub arch: &'a FieldArch,
}

impl RadianceField for MlpField<'_> {
    fn query(&self, batch: &RayBatch) -> Result<(Tensor, Tensor)> {
        let pos = encode_batch(&batch.points, self.arch.pe_levels_pos);
        let dir = encode_batch(&batch.dirs, self.arch.pe_levels_dir);
        Ok(field_forward(&Eager, &self.params.tensors, self.arch, &pos, &dir))
    }
}

impl RadianceField for SyntheticScene {
    fn query(&self, batch: &RayBatch) -> Result<(Tensor, Tensor)> {
        let n = batch.points.len();
        let mut sigma = Vec::with_capacity(n);
        let mut color = Vec::with_capacity(n * 3);
        for (p, d) in batch.points.iter().zip(&batch.dirs) {
            sigma.push(self.density(*p));
            color.extend_from_slice(&self.color(*p, *d));
        }
        Ok((Tensor::vector(sigma), Tensor::new(vec![n, 3], color)))
    }
}

/// Rays per chunk when rendering whole images.
const CHUNK_RAYS: usize = 2048;

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// `[H, W, 3]`.
    pub image: Tensor,
    /// `[H*W, K]` sample weights, when requested.
    pub weights: Option<Tensor>,
    /// `[H*W, K]` segment midpoints, when requested.
    pub midpoints: Option<Tensor>,
}

/// Untracked render of `rect` (the whole image when `None`).
pub fn render_region(
    field: &dyn RadianceField,
    camera: &Camera,
    config: &RenderConfig,
    rect: Option<Rect>,
    keep_weights: bool,
) -> Result<RenderOutput> {
    let rect = rect.unwrap_or_else(|| Rect::full(camera.width(), camera.height()));
    let full = RayBatch::for_rect(camera, rect, config)?;
    let k = config.samples;
    let mut pixels = Vec::with_capacity(full.len() * 3);
    let mut weights = Vec::new();
    let mut mids = Vec::new();
    for start in (0..full.len()).step_by(CHUNK_RAYS) {
        let end = (start + CHUNK_RAYS).min(full.len());
        let chunk = full.slice(start, end);
        let (sigma, colors) = field.query(&chunk)?;
        if !sigma.all_finite() || !colors.all_finite() {
            return Err(crate::Error::Numeric("field produced non-finite values".into()));
        }
        let out = composite_batch(&Eager, &sigma, &colors, &chunk, config.background);
        pixels.extend_from_slice(out.pixels.data());
        if keep_weights {
            weights.extend_from_slice(out.weights.data());
            mids.extend_from_slice(chunk.midpoints.data());
        }
    }
    let n = full.len();
    Ok(RenderOutput {
        image: Tensor::new(vec![rect.height, rect.width, 3], pixels),
        weights: keep_weights.then(|| Tensor::new(vec![n, k], weights)),
        midpoints: keep_weights.then(|| Tensor::new(vec![n, k], mids)),
    })
}

pub fn render_view(field: &dyn RadianceField, camera: &Camera, config: &RenderConfig) -> Result<Tensor> {
    Ok(render_region(field, camera, config, None, false)?.image)
}

impl RayBatch {
    fn slice(&self, start: usize, end: usize) -> RayBatch {
        let k = self.samples;
        let rows = |t: &Tensor| Tensor::new(vec![end - start, k], t.data()[start * k..end * k].to_vec());
        RayBatch {
            rays: self.rays[start..end].to_vec(),
            samples: k,
            points: self.points[start * k..end * k].to_vec(),
            dirs: self.dirs[start * k..end * k].to_vec(),
            deltas: rows(&self.deltas),
            midpoints: rows(&self.midpoints),
        }
    }
}

/// A patch rendered on a tape.
pub struct TrackedPatch {
    /// `[h, w, 3]` patch image.
    pub image: Var,
    /// `[h*w, K]` sample weights.
    pub weights: Var,
    /// `[h*w, K]` segment midpoints.
    pub midpoints: Tensor,
}

/// Renders `rect` with gradient tracking with respect to `params`.
pub fn render_patch(
    tape: &Tape,
    params: &[Var],
    arch: &FieldArch,
    camera: &Camera,
    config: &RenderConfig,
    rect: Rect,
) -> Result<TrackedPatch> {
    let batch = RayBatch::for_rect(camera, rect, config)?;
    let out = render_rays(tape, params, arch, &batch, config.background);
    Ok(TrackedPatch {
        image: tape.reshape(&out.pixels, &[rect.height, rect.width, 3]),
        weights: out.weights,
        midpoints: batch.midpoints,
    })
}
