//! Joint image/text embeddings and perceptual features.
//!
//! Providers are pluggable. The built-in [`ToyEncoder`] and [`ToyFeatures`]
//! are small, seeded, fully differentiable stand-ins; a pretrained model can
//! be attached over the bridge protocol instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Backend, Eager, Tape};
use crate::error::{usage, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Capabilities {
    pub text: bool,
    pub image: bool,
    pub image_vjp: bool,
}

/// Paired image and text encoders into one unit-sphere embedding space.
pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn capabilities(&self) -> Capabilities;
    fn embed_text(&self, text: &str) -> Result<Tensor>;
    fn embed_image(&self, image: &Tensor) -> Result<Tensor>;
    /// `(∂e/∂image)ᵀ · upstream`, shaped like `image`.
    fn image_vjp(&self, image: &Tensor, upstream: &Tensor) -> Result<Tensor>;
}

/// Perceptual feature layers `ψ ∈ Ψ`.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn layer_count(&self) -> usize;
    fn extract(&self, image: &Tensor) -> Result<Vec<Tensor>>;
    /// `Σ_ψ (∂ψ/∂image)ᵀ · upstream_ψ`.
    fn features_vjp(&self, image: &Tensor, upstream: &[Tensor]) -> Result<Tensor>;
}

pub(crate) fn check_image(image: &Tensor) -> Result<()> {
    match image.shape() {
        [h, w, 3] if *h > 0 && *w > 0 => {}
        s => return Err(usage(format!("expected a nonempty [H, W, 3] image, got {s:?}"))),
    }
    if image.data().iter().any(|v| !(-1e-6..=1.0 + 1e-6).contains(v)) {
        return Err(usage("image values must lie in [0, 1]"));
    }
    Ok(())
}

/// FNV-1a, used to key token vectors; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded stand-in for a contrastive image/text encoder.
///
/// Images are area-resized to 16×16, centered, projected by a fixed random
/// matrix, squashed with `tanh` and normalized. Text is a bag of words: each
/// whitespace token maps to a seeded Gaussian vector, the vectors are averaged
/// and normalized.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    seed: u64,
    name: String,
    dim: usize,
    input_size: usize,
    /// `[input_size² · 3, dim]`
    projection: Tensor,
    bias: Tensor,
}

impl ToyEncoder {
    pub const DIM: usize = 64;
    pub const INPUT_SIZE: usize = 16;

    pub fn new(seed: u64) -> Self {
        let dim = Self::DIM;
        let n_in = Self::INPUT_SIZE * Self::INPUT_SIZE * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e1c0_de00_0001);
        // unit variance of the projected, centered input at typical contrast
        let a = (3.0 / n_in as f64).sqrt() * 4.0;
        let projection = Tensor::new(
            vec![n_in, dim],
            (0..n_in * dim).map(|_| rng.random_range(-a..a)).collect(),
        );
        let bias = Tensor::vector(
            (0..dim)
                .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        Self {
            seed,
            name: format!("toy:{seed}"),
            dim,
            input_size: Self::INPUT_SIZE,
            projection,
            bias,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Image embedding on any backend; `image` is `[H, W, 3]`.
    pub fn embed_image_on<B: Backend>(&self, b: &B, image: &B::Value) -> B::Value {
        let s = self.input_size;
        let small = b.resize_area(image, s, s);
        let flat = b.reshape(&b.offset(&small, -0.5), &[1, s * s * 3]);
        let proj = b.matmul(&flat, &b.constant(self.projection.clone()));
        let pre = b.add_row(&proj, &b.constant(self.bias.clone()));
        let squashed = b.reshape(&b.tanh(&pre), &[self.dim]);
        b.normalize(&squashed)
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

impl EmbeddingProvider for ToyEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            image: true,
            image_vjp: true,
        }
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(usage("cannot embed empty text"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        let mean = Tensor::vector(acc.into_iter().map(|v| v * inv).collect());
        Ok(Eager.normalize(&mean))
    }

    fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        Ok(self.embed_image_on(&Eager, image))
    }

    fn image_vjp(&self, image: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        if upstream.len() != self.dim {
            return Err(usage(format!("upstream must have {} entries", self.dim)));
        }
        let tape = Tape::new();
        let x = tape.leaf(image.clone());
        let e = self.embed_image_on(&tape, &x);
        let u = tape.constant(upstream.clone().reshaped(vec![self.dim]));
        let out = tape.dot(&e, &u);
        Ok(tape.backward(out)?.get(x))
    }
}

/// Seeded random-weight convolution pyramid standing in for a perceptual
/// network: each level is a 3×3 stride-2 convolution followed by `tanh`.
#[derive(Debug, Clone)]
pub struct ToyFeatures {
    name: String,
    kernels: Vec<Tensor>,
}

impl ToyFeatures {
    pub const CHANNELS: [usize; 4] = [3, 8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7_0000_0000_0002);
        let kernels = Self::CHANNELS
            .windows(2)
            .map(|io| {
                let (ci, co) = (io[0], io[1]);
                let a = (6.0 / (9 * ci + 9 * co) as f64).sqrt() * 2.0;
                Tensor::new(
                    vec![3, 3, ci, co],
                    (0..9 * ci * co).map(|_| rng.random_range(-a..a)).collect(),
                )
            })
            .collect();
        Self {
            name: format!("toy:{seed}"),
            kernels,
        }
    }

    pub fn extract_on<B: Backend>(&self, b: &B, image: &B::Value) -> Vec<B::Value> {
        let mut x = b.offset(image, -0.5);
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            x = b.tanh(&b.conv2d(&x, &b.constant(k.clone()), 2, 1));
            out.push(x.clone());
        }
        out
    }
}

impl FeatureExtractor for ToyFeatures {
    fn name(&self) -> &str {
        &self.name
    }

    fn layer_count(&self) -> usize {
        self.kernels.len()
    }

    fn extract(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        check_image(image)?;
        Ok(self.extract_on(&Eager, image))
    }

    fn features_vjp(&self, image: &Tensor, upstream: &[Tensor]) -> Result<Tensor> {
        check_image(image)?;
        if upstream.len() != self.kernels.len() {
            return Err(usage("one upstream tensor per feature layer is required"));
        }
        let tape = Tape::new();
        let x = tape.leaf(image.clone());
        let feats = self.extract_on(&tape, &x);
        let mut total = None;
        for (f, u) in feats.iter().zip(upstream) {
            if tape.shape(f) != u.shape() {
                return Err(usage("upstream shape does not match feature shape"));
            }
            let term = tape.sum(&tape.mul(f, &tape.constant(u.clone())));
            total = Some(match total {
                None => term,
                Some(t) => tape.add(&t, &term),
            });
        }
        let total = total.ok_or_else(|| usage("extractor has no layers"))?;
        Ok(tape.backward(total)?.get(x))
    }
}

/// Rejects providers that lack a capability.
pub fn require(provider: &dyn EmbeddingProvider, capability: &'static str) -> Result<()> {
    let caps = provider.capabilities();
    let ok = match capability {
        "text" => caps.text,
        "image" => caps.image,
        "image_vjp" => caps.image_vjp,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Capability {
            provider: provider.name().to_string(),
            capability,
        })
    }
}
