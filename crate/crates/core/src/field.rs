//! The trainable radiance field: positional encoding and an MLP mapping a
//! point and a view direction to density and color.
//!
//! The trunk sees only the encoded position. Density is read from the trunk
//! features alone; the encoded direction joins only the final color head, so
//! density never depends on the view direction.

use std::fs;
use std::path::Path;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::error::{validation, Error, Result};
use crate::geometry::Vec3;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldArch {
    pub pe_levels_pos: usize,
    pub pe_levels_dir: usize,
    pub hidden_width: usize,
    pub depth: usize,
}

impl FieldArch {
    pub const fn desk() -> Self {
        Self {
            pe_levels_pos: 6,
            pe_levels_dir: 2,
            hidden_width: 128,
            depth: 4,
        }
    }

    pub const fn full() -> Self {
        Self {
            pe_levels_pos: 10,
            pe_levels_dir: 4,
            hidden_width: 256,
            depth: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden_width == 0 {
            return Err(validation("field arch needs depth >= 1 and hidden_width >= 1"));
        }
        Ok(())
    }

    pub fn pos_features(&self) -> usize {
        3 * (1 + 2 * self.pe_levels_pos)
    }

    pub fn dir_features(&self) -> usize {
        3 * (1 + 2 * self.pe_levels_dir)
    }

    /// Shapes of every parameter tensor in storage order: trunk layers
    /// `(W, b)`, then the density head, then the color head.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let w = self.hidden_width;
        let mut shapes = Vec::with_capacity(2 * self.depth + 4);
        let mut fan_in = self.pos_features();
        for _ in 0..self.depth {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![w]);
            fan_in = w;
        }
        shapes.push(vec![w, 1]);
        shapes.push(vec![1]);
        shapes.push(vec![w + self.dir_features(), 3]);
        shapes.push(vec![3]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Index of the density head weight; trunk tensors come before it.
    pub fn density_head_index(&self) -> usize {
        2 * self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reconstructed,
    Stylized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub role: Role,
    pub tensors: Vec<Tensor>,
}

impl FieldParams {
    pub fn validate(&self, arch: &FieldArch) -> Result<()> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != self.tensors.len()
            || shapes.iter().zip(&self.tensors).any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(validation("parameter shapes do not match the field architecture"));
        }
        if let Some(i) = self.tensors.iter().position(|t| !t.all_finite()) {
            return Err(Error::Numeric(format!("non-finite values in parameter tensor {i}")));
        }
        Ok(())
    }

    pub fn zeros(arch: &FieldArch) -> Self {
        Self {
            role: Role::Reconstructed,
            tensors: arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Flattened copy of every parameter, in storage order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

/// Xavier-uniform weights, zero biases; deterministic in `(arch, seed)`.
pub fn init_params(arch: &FieldArch, seed: u64) -> FieldParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-a..a)).collect();
                Tensor::new(shape, data)
            } else {
                Tensor::zeros(&shape)
            }
        })
        .collect();
    FieldParams {
        role: Role::Reconstructed,
        tensors,
    }
}

/// [`init_params`] with every density head bias set to `bias`.
pub fn init_params_with_density_bias(arch: &FieldArch, seed: u64, bias: f64) -> FieldParams {
    let mut params = init_params(arch, seed);
    params.tensors[arch.density_head_index() + 1].data_mut().fill(bias);
    params
}

/// `(x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x))`,
/// each block covering every component of `x`.
pub fn positional_encode(x: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * levels));
    out.extend_from_slice(x);
    for l in 0..levels {
        let freq = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|v| (freq * v).sin()));
        out.extend(x.iter().map(|v| (freq * v).cos()));
    }
    out
}

/// Encodes a batch of 3-vectors into an `[N, 3(1 + 2L)]` matrix.
pub fn encode_batch(points: &[Vec3], levels: usize) -> Tensor {
    let width = 3 * (1 + 2 * levels);
    let mut data = Vec::with_capacity(points.len() * width);
    for p in points {
        data.extend(positional_encode(p, levels));
    }
    Tensor::new(vec![points.len(), width], data)
}

/// Batched field forward pass on any backend.
///
/// `pos_enc` is `[N, pos_features]`, `dir_enc` is `[N, dir_features]`.
/// Returns densities `[N]` and colors `[N, 3]`.
pub fn field_forward<B: Backend>(
    b: &B,
    params: &[B::Value],
    arch: &FieldArch,
    pos_enc: &B::Value,
    dir_enc: &B::Value,
) -> (B::Value, B::Value) {
    let mut h = pos_enc.clone();
    for layer in 0..arch.depth {
        let pre = b.add_row(&b.matmul(&h, &params[2 * layer]), &params[2 * layer + 1]);
        h = b.softplus(&pre);
    }
    let head = arch.density_head_index();
    let sigma_pre = b.add_row(&b.matmul(&h, &params[head]), &params[head + 1]);
    let sigma = b.softplus(&sigma_pre);
    let n = b.shape(&sigma)[0];
    let sigma = b.reshape(&sigma, &[n]);
    let color_in = b.concat_cols(&h, dir_enc);
    let color_pre = b.add_row(&b.matmul(&color_in, &params[head + 2]), &params[head + 3]);
    (sigma, b.sigmoid(&color_pre))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: Vec3,
}

/// Evaluates the field at a single point and unit direction.
pub fn field_eval(params: &FieldParams, arch: &FieldArch, x: Vec3, d: Vec3) -> Result<FieldOutput> {
    params.validate(arch)?;
    let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (dn - 1.0).abs() > 1e-6 {
        return Err(Error::Usage(format!("view direction must be unit length, |d| = {dn}")));
    }
    let pos = encode_batch(&[x], arch.pe_levels_pos);
    let dir = encode_batch(&[d], arch.pe_levels_dir);
    let (sigma, color) = field_forward(&Eager, &params.tensors, arch, &pos, &dir);
    let c = color.data();
    Ok(FieldOutput {
        sigma: sigma.item(),
        color: [c[0], c[1], c[2]],
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    role: Role,
    arch: FieldArch,
    /// Base64 of every parameter as little-endian `f32`, in storage order.
    params_f32_le: String,
}

const CHECKPOINT_FORMAT: &str = "radiart-field";
const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(arch: &FieldArch, params: &FieldParams) -> Result<String> {
    params.validate(arch)?;
    let mut blob = Vec::with_capacity(arch.param_count() * 4);
    for v in params.flat() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        role: params.role,
        arch: *arch,
        params_f32_le: base64::engine::general_purpose::STANDARD.encode(blob),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn decode_checkpoint(text: &str) -> Result<(FieldArch, FieldParams)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(validation(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    file.arch.validate()?;
    let blob = base64::engine::general_purpose::STANDARD
        .decode(file.params_f32_le.as_bytes())
        .map_err(|e| validation(format!("checkpoint payload: {e}")))?;
    if blob.len() != file.arch.param_count() * 4 {
        return Err(validation("checkpoint payload size does not match its architecture"));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut params = FieldParams::zeros(&file.arch);
    params.role = file.role;
    params.set_flat(&flat);
    params.validate(&file.arch)?;
    Ok((file.arch, params))
}

pub fn save_checkpoint(path: &Path, arch: &FieldArch, params: &FieldParams) -> Result<()> {
    fs::write(path, encode_checkpoint(arch, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FieldArch, FieldParams)> {
    decode_checkpoint(&fs::read_to_string(path)?)
}
