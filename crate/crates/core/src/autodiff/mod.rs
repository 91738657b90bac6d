//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar replays the record in reverse and accumulates
//! gradients into every node that (transitively) depends on a leaf created
//! with `requires_grad`. Nodes are appended in execution order, so reverse
//! index order is a valid topological order and each node is visited once.
//!
//! A tape is confined to one thread; independent tapes can run concurrently.

pub mod gradcheck;
pub mod kernels;
mod tensor;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use kernels::ConvGeom;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    NormalizeColumns { x: Var, norms: Vec<S> },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    ChannelBias { x: Var, b: Var },
    Pool {
        x: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    },
    Upsample {
        x: Var,
        rows: Vec<(usize, usize, f64)>,
        cols: Vec<(usize, usize, f64)>,
    },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Reshape(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Record of executed primitives.
pub struct Tape<S: Scalar> {
    id: usize,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_nan<S: Scalar>(op: &str, t: &Tensor<S>) -> Result<()> {
    if t.has_nan() {
        Err(Error::Numeric(format!("{op}: NaN in input")))
    } else {
        Ok(())
    }
}

fn chw(op: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Shape(format!("{op}: expected [C, H, W], got {s:?}"))),
    }
}

fn rows_cols(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {v:?} does not belong to this tape"
            )));
        }
        Ok(())
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        self.check(v)?;
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient accumulated by the last `backward`. Tensors that require
    /// gradients but were not reached get zeros; constants get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = self.node(v).ok()?;
        if !node.requires_grad || !self.backward_done {
            return None;
        }
        let data = self.grads[v.index]
            .clone()
            .unwrap_or_else(|| vec![S::zero(); node.value.numel()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient matches value shape"))
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (p, q) = rows_cols("matmul", av.shape())?;
        let (q2, r) = rows_cols("matmul", bv.shape())?;
        if q != q2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?} inner dimensions differ",
                av.shape(),
                bv.shape()
            )));
        }
        let out = kernels::matmul(av.data(), bv.data(), p, q, r);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (r, c) = rows_cols("transpose", xv.shape())?;
        let out = kernels::transpose(xv.data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (p, r) = rows_cols("softmax_rows", xv.shape())?;
        check_nan("softmax_rows", xv)?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(r.max(1)).take(p) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::SoftmaxRows(x), &[x]))
    }

    /// Divides each column by `sqrt(Σ x² + eps)`.
    pub fn normalize_columns(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (rows, cols) = rows_cols("normalize_columns", xv.shape())?;
        let d = xv.data();
        let eps = S::of(eps);
        let norms: Vec<S> = (0..cols)
            .map(|j| {
                let mut acc = eps;
                for i in 0..rows {
                    acc += d[i * cols + j] * d[i * cols + j];
                }
                acc.sqrt()
            })
            .collect();
        let out = (0..rows * cols).map(|k| d[k] / norms[k % cols]).collect();
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::NormalizeColumns { x, norms },
            &[x],
        ))
    }

    /// Same-size dilated cross-correlation of `x: [C, H, W]` with `k: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (xv, kv) = (&self.node(x)?.value, &self.node(k)?.value);
        let (channels, height, width) = chw("conv2d", xv.shape())?;
        let [filters, kc, kh, kw] = *kv.shape() else {
            return Err(Error::Shape(format!(
                "conv2d: kernel must be [F, C, kh, kw], got {:?}",
                kv.shape()
            )));
        };
        if kc != channels {
            return Err(Error::Shape(format!(
                "conv2d: kernel {:?} does not match input {:?}",
                kv.shape(),
                xv.shape()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Argument(format!(
                "conv2d: kernel size {kh}x{kw} must be odd"
            )));
        }
        if dilation == 0 {
            return Err(Error::Argument("conv2d: dilation must be positive".into()));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            dilation,
        };
        let out = kernels::conv2d(xv.data(), kv.data(), &geom);
        Ok(self.push(
            Tensor::new(vec![filters, height, width], out)?,
            Op::Conv2d { x, k, geom },
            &[x, k],
        ))
    }

    /// Adds `b[c]` to every pixel of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(b)?.value);
        let (c, h, w) = chw("add_channel_bias", xv.shape())?;
        if bv.numel() != c {
            return Err(Error::Shape(format!(
                "add_channel_bias: bias {:?} for {c} channels",
                bv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for (plane, &bias) in out.chunks_mut(h * w).zip(bv.data()) {
            plane.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::ChannelBias { x, b }, &[x, b]))
    }

    fn pool(&mut self, x: Var, rows: Vec<(usize, usize)>, cols: Vec<(usize, usize)>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (c, h, w) = chw("pool", xv.shape())?;
        let out = kernels::pool_bins(xv.data(), c, h, w, &rows, &cols);
        let shape = vec![c, rows.len(), cols.len()];
        Ok(self.push(Tensor::new(shape, out)?, Op::Pool { x, rows, cols }, &[x]))
    }

    /// Non-overlapping `window x window` mean pooling; trailing remainder rows
    /// and columns are dropped.
    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let (_, h, w) = chw("avg_pool", self.node(x)?.value.shape())?;
        if window == 0 || window > h || window > w {
            return Err(Error::Argument(format!(
                "avg_pool: window {window} does not fit a {h}x{w} input"
            )));
        }
        let bins = |n: usize| (0..n / window).map(|i| (i * window, (i + 1) * window)).collect();
        self.pool(x, bins(h), bins(w))
    }

    /// Mean pooling onto a `grid x grid` output.
    pub fn adaptive_avg_pool(&mut self, x: Var, grid: usize) -> Result<Var> {
        let (_, h, w) = chw("adaptive_avg_pool", self.node(x)?.value.shape())?;
        if grid == 0 || grid > h || grid > w {
            return Err(Error::Argument(format!(
                "adaptive_avg_pool: grid {grid} does not fit a {h}x{w} input"
            )));
        }
        self.pool(x, kernels::adaptive_bins(h, grid), kernels::adaptive_bins(w, grid))
    }

    /// Bilinear resize with aligned corners.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (c, h, w) = chw("upsample_bilinear", xv.shape())?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument(format!(
                "upsample_bilinear: target {out_h}x{out_w} is empty"
            )));
        }
        let rows = kernels::interp_table(h, out_h);
        let cols = kernels::interp_table(w, out_w);
        let out = kernels::upsample(xv.data(), c, h, w, &rows, &cols);
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], out)?,
            Op::Upsample { x, rows, cols },
            &[x],
        ))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Argument("concat_channels: no inputs".into()))?;
        let (_, h, w) = chw("concat_channels", self.node(*first)?.value.shape())?;
        let mut channels = 0;
        let mut out = Vec::new();
        for &x in xs {
            let xv = &self.node(x)?.value;
            let (c, xh, xw) = chw("concat_channels", xv.shape())?;
            if (xh, xw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: spatial {xh}x{xw} differs from {h}x{w}"
                )));
            }
            channels += c;
            out.extend_from_slice(xv.data());
        }
        Ok(self.push(
            Tensor::new(vec![channels, h, w], out)?,
            Op::Concat(xs.to_vec()),
            xs,
        ))
    }

    /// Channels `start..start + len` of `x: [C, H, W]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (c, h, w) = chw("slice_channels", xv.shape())?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "slice_channels: {start}..{} out of {c} channels",
                start + len
            )));
        }
        let out = xv.data()[start * h * w..(start + len) * h * w].to_vec();
        Ok(self.push(
            Tensor::new(vec![len, h, w], out)?,
            Op::SliceChannels { x, start },
            &[x],
        ))
    }

    fn unary(&mut self, name: &str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        check_nan(name, xv)?;
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(out, op, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Smooth rectifier `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, kernels::softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let s = S::of(factor);
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of all elements in row-major order, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let mut acc = S::zero();
        for &v in xv.data() {
            acc += v;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Sum(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- reverse pass ----

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let root = &self.nodes[loss.index];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.backward_done = true;
        if !root.requires_grad {
            return Ok(());
        }
        self.grads[loss.index] = Some(vec![S::one()]);
        for idx in (0..=loss.index).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            propagate(&self.nodes, idx, &g, &mut self.grads);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated on first use. `None` for constants.
fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.index];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.index].get_or_insert_with(|| vec![S::zero(); node.value.numel()]))
}

fn add_into<S: Scalar>(dst: &mut [S], src: impl Iterator<Item = S>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate<S: Scalar>(nodes: &[Node<S>], idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[idx];
    let val = |v: Var| &nodes[v.index].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (p, q) = (val(*a).shape()[0], val(*a).shape()[1]);
            let r = val(*b).shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul_grad_a(g, val(*b).data(), ga, p, q, r);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_grad_b(val(*a).data(), g, gb, p, q, r);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, kernels::transpose(g, r, c).into_iter());
            }
        }
        Op::SoftmaxRows(x) => {
            let r = node.value.shape()[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((gx_row, g_row), y_row) in gx
                    .chunks_mut(r)
                    .zip(g.chunks(r))
                    .zip(node.value.data().chunks(r))
                {
                    let mut dot = S::zero();
                    for (&gi, &yi) in g_row.iter().zip(y_row) {
                        dot += gi * yi;
                    }
                    for ((o, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *o += yi * (gi - dot);
                    }
                }
            }
        }
        Op::NormalizeColumns { x, norms } => {
            let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..cols {
                    let mut dot = S::zero();
                    for i in 0..rows {
                        dot += g[i * cols + j] * y[i * cols + j];
                    }
                    for i in 0..rows {
                        let k = i * cols + j;
                        gx[k] += (g[k] - y[k] * dot) / norms[j];
                    }
                }
            }
        }
        Op::Conv2d { x, k, geom } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::conv2d_grad_input(g, val(*k).data(), gx, geom);
            }
            if let Some(gk) = slot(nodes, grads, *k) {
                kernels::conv2d_grad_kernel(g, val(*x).data(), gk, geom);
            }
        }
        Op::ChannelBias { x, b } => {
            let plane = node.value.shape()[1] * node.value.shape()[2];
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (o, chunk) in gb.iter_mut().zip(g.chunks(plane)) {
                    let mut acc = S::zero();
                    for &v in chunk {
                        acc += v;
                    }
                    *o += acc;
                }
            }
        }
        Op::Pool { x, rows, cols } => {
            let [c, h, w] = *val(*x).shape() else { unreachable!() };
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::pool_bins_grad(g, gx, c, h, w, rows, cols);
            }
        }
        Op::Upsample { x, rows, cols } => {
            let [c, h, w] = *val(*x).shape() else { unreachable!() };
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::upsample_grad(g, gx, c, h, w, rows, cols);
            }
        }
        Op::Concat(xs) => {
            let mut offset = 0;
            for &x in xs {
                let n = val(x).numel();
                if let Some(gx) = slot(nodes, grads, x) {
                    add_into(gx, g[offset..offset + n].iter().copied());
                }
                offset += n;
            }
        }
        Op::SliceChannels { x, start } => {
            let plane = node.value.shape()[1] * node.value.shape()[2];
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(&mut gx[start * plane..], g.iter().copied());
            }
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(
                    gx,
                    g.iter().zip(xd).map(|(&gi, &v)| if v > S::zero() { gi } else { S::zero() }),
                );
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (S::one() - yi)));
            }
        }
        Op::Softplus(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g.iter().zip(xd).map(|(&gi, &v)| gi * kernels::sigmoid(v)));
            }
        }
        Op::Abs(x) => {
            let xd = val(*x).data();
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(
                    gx,
                    g.iter().zip(xd).map(|(&gi, &v)| {
                        if v > S::zero() {
                            gi
                        } else if v < S::zero() {
                            -gi
                        } else {
                            S::zero()
                        }
                    }),
                );
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    add_into(gv, g.iter().copied());
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g.iter().map(|&v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g.iter().zip(bd).map(|(&gi, &bi)| gi * bi));
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_into(gb, g.iter().zip(ad).map(|(&gi, &ai)| gi * ai));
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g.iter().map(|&v| v * *s));
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let g0 = g[0];
                gx.iter_mut().for_each(|o| *o += g0);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, g.iter().copied());
            }
        }
    }
}
