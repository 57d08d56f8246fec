//! Dense row-major `f64` tensors and the forward kernels shared by the eager
//! and taped backends.
//!
//! Every kernel here is row-independent: the value computed for one row of a
//! batch never depends on how many other rows are in the batch. Rendering a
//! patch and rendering the full image therefore agree bit for bit.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulation");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Last axis length and the number of leading rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        (rows, cols)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `c = beta * c + a · b` for row-major `a: [m, k]`, `b: [k, n]`, optionally
/// reading either operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn dims2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape.len(), 2, "expected a matrix, got shape {:?}", t.shape);
    (t.shape[0], t.shape[1])
}

pub fn add_row(x: &Tensor, bias: &Tensor) -> Tensor {
    let (_, cols) = x.rows_cols();
    assert_eq!(bias.len(), cols, "bias length mismatch");
    let mut out = x.clone();
    for row in out.data.chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sum_last(x: &Tensor) -> Tensor {
    let (_, cols) = x.rows_cols();
    let shape = x.shape[..x.shape.len().saturating_sub(1)].to_vec();
    let data = if cols == 0 {
        vec![0.0; shape.iter().product()]
    } else {
        x.data.chunks(cols).map(|r| r.iter().sum()).collect()
    };
    Tensor::new(shape, data)
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (ra, ca) = dims2(a);
    let (rb, cb) = dims2(b);
    assert_eq!(ra, rb, "concat row mismatch");
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for r in 0..ra {
        data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
    }
    Tensor::new(vec![ra, ca + cb], data)
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (rows, cols) = dims2(x);
    assert!(start + len <= cols, "column slice out of range");
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&x.data[r * cols + start..r * cols + start + len]);
    }
    Tensor::new(vec![rows, len], data)
}

pub fn crop(img: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    assert_eq!(img.shape.len(), 3, "crop expects [H, W, C]");
    let (ih, iw, c) = (img.shape[0], img.shape[1], img.shape[2]);
    assert!(y0 + h <= ih && x0 + w <= iw, "crop out of bounds");
    let mut data = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let start = (y * iw + x0) * c;
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    Tensor::new(vec![h, w, c], data)
}

/// Inverse of [`crop`]: places `patch` into a zero image of the given size.
pub fn uncrop(patch: &Tensor, ih: usize, iw: usize, y0: usize, x0: usize) -> Tensor {
    let (h, w, c) = (patch.shape[0], patch.shape[1], patch.shape[2]);
    let mut out = Tensor::zeros(&[ih, iw, c]);
    for y in 0..h {
        let dst = ((y0 + y) * iw + x0) * c;
        out.data[dst..dst + w * c].copy_from_slice(&patch.data[y * w * c..(y + 1) * w * c]);
    }
    out
}

/// `T_k = prod_{i<k} x_i` along the last axis.
pub fn excl_cumprod(x: &Tensor) -> Tensor {
    let (_, cols) = x.rows_cols();
    let mut out = x.clone();
    if cols == 0 {
        return out;
    }
    for (row, src) in out.data.chunks_mut(cols).zip(x.data.chunks(cols)) {
        let mut acc = 1.0;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = acc;
            acc *= v;
        }
    }
    out
}

/// `S_k = sum_{i<k} x_i` along the last axis.
pub fn excl_cumsum(x: &Tensor) -> Tensor {
    let (_, cols) = x.rows_cols();
    let mut out = x.clone();
    if cols == 0 {
        return out;
    }
    for (row, src) in out.data.chunks_mut(cols).zip(x.data.chunks(cols)) {
        let mut acc = 0.0;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = acc;
            acc += v;
        }
    }
    out
}

/// Per-ray weighted sum: `out[r, c] = sum_k w[r, k] * vals[r*K + k, c]`.
pub fn ray_sum(w: &Tensor, vals: &Tensor) -> Tensor {
    let (rays, k) = dims2(w);
    let (n, c) = dims2(vals);
    assert_eq!(n, rays * k, "ray_sum sample count mismatch");
    let mut out = vec![0.0; rays * c];
    for r in 0..rays {
        let dst = &mut out[r * c..(r + 1) * c];
        for s in 0..k {
            let wk = w.data[r * k + s];
            let src = &vals.data[(r * k + s) * c..(r * k + s + 1) * c];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += wk * v;
            }
        }
    }
    Tensor::new(vec![rays, c], out)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &Tensor) -> f64 {
    dot(a, a).sqrt()
}

/// Uses `ln_1p` around the largest term so tiny tails survive.
pub fn logsumexp(x: &Tensor) -> f64 {
    let Some((imax, &m)) = x
        .data
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, &f64)>, (i, v)| match best {
            Some((_, b)) if *b >= *v => best,
            _ => Some((i, v)),
        })
    else {
        return f64::NEG_INFINITY;
    };
    if !m.is_finite() {
        return m;
    }
    let rest: f64 = x
        .data
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != imax)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + rest.ln_1p()
}

/// Output spatial size of a convolution.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// 2D convolution of `x: [H, W, Ci]` with `w: [kh, kw, Ci, Co]`, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, ci2, co) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(ci, ci2, "conv channel mismatch");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kw, stride, pad);
    let mut out = vec![0.0; ho * wo * co];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let src = &x.data[((iy as usize) * wd + ix as usize) * ci..][..ci];
                    for (c, &xv) in src.iter().enumerate() {
                        let wrow = &w.data[((ky * kw + kx) * ci + c) * co..][..co];
                        for (o, wv) in dst.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, co], out)
}

/// Area-filter resampling matrix mapping `n_in` samples onto `n_out`: each
/// output cell averages the input cells it overlaps, weighted by overlap.
pub fn area_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let scale = n_in as f64 / n_out as f64;
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let lo = o as f64 * scale;
        let hi = (o + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(n_in);
        for i in first..last {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            m[o * n_in + i] = overlap / scale;
        }
    }
    m
}

/// Area resize of `x: [H, W, C]` to `[ho, wo, C]`.
pub fn resize_area(x: &Tensor, ho: usize, wo: usize) -> Tensor {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    if (h, w) == (ho, wo) {
        return x.clone();
    }
    let ay = area_matrix(ho, h);
    let ax = area_matrix(wo, w);
    // rows: [ho, w*c] = ay · x
    let mut rows = vec![0.0; ho * w * c];
    gemm(ho, h, w * c, &ay, false, &x.data, false, 0.0, &mut rows);
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        let src = &rows[y * w * c..(y + 1) * w * c];
        let mut dst = vec![0.0; wo * c];
        gemm(wo, w, c, &ax, false, src, false, 0.0, &mut dst);
        out[y * wo * c..(y + 1) * wo * c].copy_from_slice(&dst);
    }
    Tensor::new(vec![ho, wo, c], out)
}

/// Adjoint of [`resize_area`].
pub fn resize_area_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let (ho, wo, c) = (g.shape[0], g.shape[1], g.shape[2]);
    if (h, w) == (ho, wo) {
        return g.clone();
    }
    let ay = area_matrix(ho, h);
    let ax = area_matrix(wo, w);
    let mut rows = vec![0.0; ho * w * c];
    for y in 0..ho {
        let src = &g.data[y * wo * c..(y + 1) * wo * c];
        gemm(w, wo, c, &ax, true, src, false, 0.0, &mut rows[y * w * c..(y + 1) * w * c]);
    }
    let mut out = vec![0.0; h * w * c];
    gemm(h, ho, w * c, &ay, true, &rows, false, 0.0, &mut out);
    Tensor::new(vec![h, w, c], out)
}
