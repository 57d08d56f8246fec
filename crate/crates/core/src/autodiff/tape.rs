use std::cell::RefCell;

use super::{Backend, Eager};
use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Reshape(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    Crop(usize, usize, usize),
    ExclCumprod(usize),
    ExclCumsum(usize),
    RaySum(usize, usize),
    Normalize(usize),
    Dot(usize, usize),
    LogSumExp(usize),
    Max(usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ResizeArea(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Crop(..) => "crop",
            Op::ExclCumprod(..) => "excl_cumprod",
            Op::ExclCumsum(..) => "excl_cumsum",
            Op::RaySum(..) => "ray_sum",
            Op::Normalize(..) => "normalize",
            Op::Dot(..) => "dot",
            Op::LogSumExp(..) => "logsumexp",
            Op::Max(..) => "max",
            Op::Conv2d { .. } => "conv2d",
            Op::ResizeArea(..) => "resize_area",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::RaySum(a, b)
            | Op::Dot(a, b) => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Reshape(a)
            | Op::SliceCols(a, _)
            | Op::Crop(a, _, _)
            | Op::ExclCumprod(a)
            | Op::ExclCumsum(a)
            | Op::Normalize(a)
            | Op::LogSumExp(a)
            | Op::Max(a)
            | Op::ResizeArea(a) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation graph. Nodes are appended in evaluation order, so
/// the graph is acyclic and every input precedes its consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the output does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => op.inputs().iter().any(|&i| nodes[i].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, x: &Var, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[x.0].value);
        self.push(value, op)
    }

    fn binary(&self, a: &Var, b: &Var, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, op)
    }

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                output.0,
                out.value.shape()
            )));
        }
        if !out.value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output value at node {} ({})",
                output.0,
                out.op.name()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = local_vjp(&nodes, id, &g);
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                if !contrib.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient flowing from node {id} ({}) into node {input} ({})",
                        node.op.name(),
                        nodes[input].op.name()
                    )));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn local_vjp(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let node = &nodes[id];
    let y = &node.value;
    let val = |i: usize| &nodes[i].value;
    match node.op {
        Op::Leaf | Op::Const => vec![],
        Op::MatMul(a, b) => {
            let (m, k) = tensor::dims2(val(a));
            let n = val(b).shape()[1];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            if nodes[a].requires_grad {
                gemm(m, n, k, g.data(), false, val(b).data(), true, 0.0, &mut da);
            }
            if nodes[b].requires_grad {
                gemm(k, m, n, val(a).data(), true, g.data(), false, 0.0, &mut db);
            }
            vec![
                (a, Tensor::new(vec![m, k], da)),
                (b, Tensor::new(vec![k, n], db)),
            ]
        }
        Op::AddRow(x, b) => {
            let (_, cols) = g.rows_cols();
            let mut db = vec![0.0; cols];
            for row in g.data().chunks(cols) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![(x, g.clone()), (b, Tensor::new(val(b).shape().to_vec(), db))]
        }
        Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (a, g.zip_map(val(b), |gv, bv| gv * bv)),
            (b, g.zip_map(val(a), |gv, av| gv * av)),
        ],
        Op::Scale(x, c) => vec![(x, g.map(|v| v * c))],
        Op::Offset(x) => vec![(x, g.clone())],
        Op::Sin(x) => vec![(x, g.zip_map(val(x), |gv, xv| gv * xv.cos()))],
        Op::Cos(x) => vec![(x, g.zip_map(val(x), |gv, xv| -gv * xv.sin()))],
        Op::Exp(x) => vec![(x, g.zip_map(y, |gv, yv| gv * yv))],
        Op::Ln(x) => vec![(x, g.zip_map(val(x), |gv, xv| gv / xv))],
        Op::Softplus(x) => vec![(x, g.zip_map(val(x), |gv, xv| gv * tensor::sigmoid(xv)))],
        Op::Sigmoid(x) => vec![(x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))],
        Op::Tanh(x) => vec![(x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)))],
        Op::Abs(x) => vec![(x, g.zip_map(val(x), |gv, xv| gv * sign(xv)))],
        Op::Square(x) => vec![(x, g.zip_map(val(x), |gv, xv| 2.0 * gv * xv))],
        Op::Sum(x) => vec![(x, Tensor::full(val(x).shape(), g.item()))],
        Op::Mean(x) => {
            let n = val(x).len() as f64;
            vec![(x, Tensor::full(val(x).shape(), g.item() / n))]
        }
        Op::SumLast(x) => {
            let (_, cols) = val(x).rows_cols();
            let mut d = Vec::with_capacity(val(x).len());
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv, cols));
            }
            vec![(x, Tensor::new(val(x).shape().to_vec(), d))]
        }
        Op::Reshape(x) => vec![(x, g.clone().reshaped(val(x).shape().to_vec()))],
        Op::ConcatCols(a, b) => {
            let ca = val(a).shape()[1];
            let cb = val(b).shape()[1];
            vec![
                (a, tensor::slice_cols(g, 0, ca)),
                (b, tensor::slice_cols(g, ca, cb)),
            ]
        }
        Op::SliceCols(x, start) => {
            let (rows, cols) = tensor::dims2(val(x));
            let len = g.shape()[1];
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![(x, Tensor::new(vec![rows, cols], d))]
        }
        Op::Crop(x, y0, x0) => {
            let s = val(x).shape();
            vec![(x, tensor::uncrop(g, s[0], s[1], y0, x0))]
        }
        Op::ExclCumprod(x) => {
            let xv = val(x);
            let (_, k) = xv.rows_cols();
            let mut d = vec![0.0; xv.len()];
            for (r, dr) in d.chunks_mut(k.max(1)).enumerate() {
                let xs = &xv.data()[r * k..(r + 1) * k];
                let ts = &y.data()[r * k..(r + 1) * k];
                let gs = &g.data()[r * k..(r + 1) * k];
                // s = sum_{j>i} g_j prod_{i<l<j} x_l, built from the back.
                let mut s = 0.0;
                for i in (0..k).rev() {
                    dr[i] = ts[i] * s;
                    s = gs[i] + xs[i] * s;
                }
            }
            vec![(x, Tensor::new(xv.shape().to_vec(), d))]
        }
        Op::ExclCumsum(x) => {
            let (_, k) = g.rows_cols();
            let mut d = vec![0.0; g.len()];
            for (dr, gr) in d.chunks_mut(k.max(1)).zip(g.data().chunks(k.max(1))) {
                let mut s = 0.0;
                for i in (0..k).rev() {
                    dr[i] = s;
                    s += gr[i];
                }
            }
            vec![(x, Tensor::new(g.shape().to_vec(), d))]
        }
        Op::RaySum(w, c) => {
            let wv = val(w);
            let cv = val(c);
            let (rays, k) = tensor::dims2(wv);
            let ch = cv.shape()[1];
            let mut dw = vec![0.0; rays * k];
            let mut dc = vec![0.0; rays * k * ch];
            for r in 0..rays {
                let gr = &g.data()[r * ch..(r + 1) * ch];
                for s in 0..k {
                    let idx = r * k + s;
                    let crow = &cv.data()[idx * ch..(idx + 1) * ch];
                    dw[idx] = gr.iter().zip(crow).map(|(a, b)| a * b).sum();
                    let wk = wv.data()[idx];
                    for (d, gv) in dc[idx * ch..(idx + 1) * ch].iter_mut().zip(gr) {
                        *d = wk * gv;
                    }
                }
            }
            vec![
                (w, Tensor::new(vec![rays, k], dw)),
                (c, Tensor::new(vec![rays * k, ch], dc)),
            ]
        }
        Op::Normalize(x) => {
            let n = tensor::norm(val(x));
            let yg = tensor::dot(y, g);
            vec![(x, g.zip_map(y, |gv, yv| (gv - yv * yg) / n))]
        }
        Op::Dot(a, b) => {
            let gv = g.item();
            vec![(a, val(b).map(|v| v * gv)), (b, val(a).map(|v| v * gv))]
        }
        Op::LogSumExp(x) => {
            let lse = y.item();
            let gv = g.item();
            vec![(x, val(x).map(|v| gv * (v - lse).exp()))]
        }
        Op::Max(x) => {
            let xv = val(x);
            let mut d = Tensor::zeros(xv.shape());
            if let Some((i, _)) = xv
                .data()
                .iter()
                .enumerate()
                .fold(None::<(usize, f64)>, |best, (i, &v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((i, v)),
                })
            {
                d.data_mut()[i] = g.item();
            }
            vec![(x, d)]
        }
        Op::Conv2d { x, w, stride, pad } => conv2d_vjp(val(x), val(w), g, stride, pad)
            .into_iter()
            .zip([x, w])
            .map(|(t, i)| (i, t))
            .collect(),
        Op::ResizeArea(x) => {
            let s = val(x).shape();
            vec![(x, tensor::resize_area_adjoint(g, s[0], s[1]))]
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn conv2d_vjp(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> [Tensor; 2] {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (g.shape()[0], g.shape()[1]);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            let grow = &g.data()[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
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
                    let base = ((iy as usize) * wd + ix as usize) * ci;
                    for c in 0..ci {
                        let woff = ((ky * kw + kx) * ci + c) * co;
                        let wrow = &w.data()[woff..woff + co];
                        let xv = x.data()[base + c];
                        let mut acc = 0.0;
                        for o in 0..co {
                            acc += wrow[o] * grow[o];
                            dw[woff + o] += xv * grow[o];
                        }
                        dx[base + c] += acc;
                    }
                }
            }
        }
    }
    [
        Tensor::new(x.shape().to_vec(), dx),
        Tensor::new(w.shape().to_vec(), dw),
    ]
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }
    fn value(&self, v: &Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }
    fn shape(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }
    fn item(&self, v: &Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }
    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.matmul(x, y), Op::MatMul(a.0, b.0))
    }
    fn add_row(&self, x: &Var, bias: &Var) -> Var {
        self.binary(x, bias, |x, b| Eager.add_row(x, b), Op::AddRow(x.0, bias.0))
    }
    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.add(x, y), Op::Add(a.0, b.0))
    }
    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.sub(x, y), Op::Sub(a.0, b.0))
    }
    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.mul(x, y), Op::Mul(a.0, b.0))
    }
    fn scale(&self, x: &Var, c: f64) -> Var {
        self.unary(x, |t| Eager.scale(t, c), Op::Scale(x.0, c))
    }
    fn offset(&self, x: &Var, c: f64) -> Var {
        self.unary(x, |t| Eager.offset(t, c), Op::Offset(x.0))
    }
    fn sin(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.sin(t), Op::Sin(x.0))
    }
    fn cos(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.cos(t), Op::Cos(x.0))
    }
    fn exp(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.exp(t), Op::Exp(x.0))
    }
    fn ln(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.ln(t), Op::Ln(x.0))
    }
    fn softplus(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.softplus(t), Op::Softplus(x.0))
    }
    fn sigmoid(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.sigmoid(t), Op::Sigmoid(x.0))
    }
    fn tanh(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.tanh(t), Op::Tanh(x.0))
    }
    fn abs(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.abs(t), Op::Abs(x.0))
    }
    fn square(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.square(t), Op::Square(x.0))
    }
    fn sum(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.sum(t), Op::Sum(x.0))
    }
    fn mean(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.mean(t), Op::Mean(x.0))
    }
    fn sum_last(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.sum_last(t), Op::SumLast(x.0))
    }
    fn reshape(&self, x: &Var, shape: &[usize]) -> Var {
        self.unary(x, |t| Eager.reshape(t, shape), Op::Reshape(x.0))
    }
    fn concat_cols(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.concat_cols(x, y), Op::ConcatCols(a.0, b.0))
    }
    fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Var {
        self.unary(x, |t| Eager.slice_cols(t, start, len), Op::SliceCols(x.0, start))
    }
    fn crop(&self, img: &Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        self.unary(img, |t| Eager.crop(t, y0, x0, h, w), Op::Crop(img.0, y0, x0))
    }
    fn excl_cumprod(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.excl_cumprod(t), Op::ExclCumprod(x.0))
    }
    fn excl_cumsum(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.excl_cumsum(t), Op::ExclCumsum(x.0))
    }
    fn ray_sum(&self, w: &Var, vals: &Var) -> Var {
        self.binary(w, vals, |a, b| Eager.ray_sum(a, b), Op::RaySum(w.0, vals.0))
    }
    fn normalize(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.normalize(t), Op::Normalize(x.0))
    }
    fn dot(&self, a: &Var, b: &Var) -> Var {
        self.binary(a, b, |x, y| Eager.dot(x, y), Op::Dot(a.0, b.0))
    }
    fn logsumexp(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.logsumexp(t), Op::LogSumExp(x.0))
    }
    fn max(&self, x: &Var) -> Var {
        self.unary(x, |t| Eager.max(t), Op::Max(x.0))
    }
    fn conv2d(&self, x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
        self.binary(
            x,
            w,
            |a, b| Eager.conv2d(a, b, stride, pad),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
        )
    }
    fn resize_area(&self, x: &Var, ho: usize, wo: usize) -> Var {
        self.unary(x, |t| Eager.resize_area(t, ho, wo), Op::ResizeArea(x.0))
    }
}
