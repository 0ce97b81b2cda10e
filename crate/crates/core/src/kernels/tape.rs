//! Reverse-mode tape over matrix primitives.
//!
//! Every primitive appends one node holding its forward value. Because nodes
//! only ever reference earlier nodes, walking the node list backwards is a
//! valid reverse topological order. Shape errors inside primitives are
//! programming errors and panic; the layer functions in
//! [`layers`](super::layers) validate user-facing shapes first.

use super::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Matrix};

static EMPTY_STORE: ParamStore = ParamStore::new();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Hypot(Var, Var),
    Clamp(Var, f64, f64),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    Standardize { x: Var, groups: usize, eps: f64 },
    DepthwiseConv { x: Var, kernel: Var, dilation: usize },
    Frames { x: Var, src: Vec<usize>, window: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    /// A tape with no parameter store, for pure functions of inputs.
    pub fn detached() -> Tape<'static> {
        Tape::new(&EMPTY_STORE)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A frozen input. It never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// An input whose gradient is tracked; see [`Gradients::wrt`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter, created once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param, &[]);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).matmul(self.val(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        let mut value = Matrix::zeros(va.rows(), vb.rows());
        gemm(1.0, va, false, vb, true, 0.0, &mut value);
        self.push(value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.val(x), self.val(row));
        assert_eq!(vr.shape(), (1, vx.cols()), "add_row expects a 1x{} row", vx.cols());
        let r = vr.row(0);
        let value = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| vx[(i, j)] + r[j]);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.val(x), self.val(row));
        assert_eq!(vr.shape(), (1, vx.cols()), "mul_row expects a 1x{} row", vx.cols());
        let r = vr.row(0);
        let value = Matrix::from_fn(vx.rows(), vx.cols(), |i, j| vx[(i, j)] * r[j]);
        self.push(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.val(x).scaled(factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.val(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.val(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| gelu(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.val(x).map(f64::ln);
        self.push(value, Op::Ln(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.val(x).map(f64::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    /// Elementwise `sqrt(a^2 + b^2)`; the gradient at the origin is taken as 0.
    pub fn hypot(&mut self, a: Var, b: Var) -> Var {
        let value = self.val(a).zip_map(self.val(b), f64::hypot);
        self.push(value, Op::Hypot(a, b), &[a, b])
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.val(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.val(x).slice_cols(start, start + len);
        self.push(value, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.val(p)).collect();
        let value = Matrix::hconcat(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.val(p)).collect();
        let value = Matrix::vconcat(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row `i` of the output is row `indices[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let vx = self.val(x);
        let mut value = Matrix::zeros(indices.len(), vx.cols());
        for (i, &src) in indices.iter().enumerate() {
            value.row_mut(i).copy_from_slice(vx.row(src));
        }
        self.push(value, Op::GatherRows(x, indices.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.val(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.val(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.val(x);
        let mut value = vx.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row, per-group `(x - mean) / sqrt(var + eps)` over contiguous
    /// column groups.
    pub fn standardize(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let vx = self.val(x);
        assert!(groups > 0 && vx.cols().is_multiple_of(groups), "columns not divisible by groups");
        let size = vx.cols() / groups;
        let mut value = vx.clone();
        for r in 0..value.rows() {
            for chunk in value.row_mut(r).chunks_mut(size) {
                let (mean, inv) = group_stats(chunk, eps);
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
        }
        self.push(value, Op::Standardize { x, groups, eps }, &[x])
    }

    /// Per-channel convolution with zero padding that preserves length.
    /// `kernel` is `k x C` with odd `k`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, dilation: usize) -> Var {
        let (vx, vk) = (self.val(x), self.val(kernel));
        assert_eq!(vx.cols(), vk.cols(), "kernel channels must match input");
        assert!(vk.rows() % 2 == 1, "kernel size must be odd");
        let (t_len, channels, k) = (vx.rows(), vx.cols(), vk.rows());
        let half = (k / 2) as isize;
        let mut value = Matrix::zeros(t_len, channels);
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + (j as isize - half) * dilation as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let (xr, kr) = (vx.row(src as usize), vk.row(j));
                let out = value.row_mut(t);
                for c in 0..channels {
                    out[c] += kr[c] * xr[c];
                }
            }
        }
        self.push(
            value,
            Op::DepthwiseConv {
                x,
                kernel,
                dilation,
            },
            &[x, kernel],
        )
    }

    /// Windowed frames of every column of `x` (`T x C`).
    ///
    /// The signal is reflect-padded by `window.len() / 2` on both sides
    /// (edge sample not repeated). Output row `c * n_frames + f` holds frame
    /// `f` of channel `c`, multiplied by `window`.
    pub fn frames(&mut self, x: Var, window: &[f64], hop: usize) -> Var {
        let vx = self.val(x);
        let (t_len, channels) = vx.shape();
        let win = window.len();
        let src = frame_sources(t_len, win, hop);
        let n_frames = src.len() / win;
        let mut value = Matrix::zeros(channels * n_frames, win);
        for c in 0..channels {
            for f in 0..n_frames {
                let row = value.row_mut(c * n_frames + f);
                for j in 0..win {
                    row[j] = window[j] * vx[(src[f * win + j], c)];
                }
            }
        }
        self.push(
            value,
            Op::Frames {
                x,
                src,
                window: window.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.val(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        Gradients {
            param_vars: self.param_vars.clone(),
            nodes_needing_grad: self.nodes.iter().map(|n| n.needs_grad).collect(),
            grads,
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, true, 0.0, &mut da);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(1.0, va, true, g, false, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    gemm(1.0, g, false, vb, false, 0.0, &mut da);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(1.0, g, true, va, false, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    acc(*a, g.zip_map(vb, |d, y| d * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(va, |d, x| d * x));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if needs(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.val(*x), self.val(*row));
                if needs(*x) {
                    let r = vr.row(0);
                    acc(*x, Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * r[j]));
                }
                if needs(*row) {
                    acc(*row, column_sums(&g.zip_map(vx, |d, v| d * v)));
                }
            }
            Op::Scale(x, c) => acc(*x, g.scaled(*c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Gelu(x) => acc(*x, g.zip_map(self.val(*x), |d, v| d * gelu(v).1)),
            Op::Ln(x) => acc(*x, g.zip_map(self.val(*x), |d, v| d / v)),
            Op::Abs(x) => acc(
                *x,
                g.zip_map(self.val(*x), |d, v| {
                    if v > 0.0 {
                        d
                    } else if v < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Square(x) => acc(*x, g.zip_map(self.val(*x), |d, v| 2.0 * d * v)),
            Op::Hypot(a, b) => {
                let ratio = |num: &Matrix| {
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let h = y[(i, j)];
                        if h > 0.0 {
                            g[(i, j)] * num[(i, j)] / h
                        } else {
                            0.0
                        }
                    })
                };
                if needs(*a) {
                    acc(*a, ratio(self.val(*a)));
                }
                if needs(*b) {
                    acc(*b, ratio(self.val(*b)));
                }
            }
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.zip_map(self.val(*x), |d, v| if v >= *lo && v <= *hi { d } else { 0.0 }),
            ),
            Op::SliceCols(x, start) => {
                let vx = self.val(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if needs(p) {
                        acc(p, g.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.val(p).rows();
                    if needs(p) {
                        acc(p, g.slice_rows(off, off + h));
                    }
                    off += h;
                }
            }
            Op::GatherRows(x, indices) => {
                let vx = self.val(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for (i, &src) in indices.iter().enumerate() {
                    for (d, s) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.val(*x).shape();
                acc(*x, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.val(*x).shape();
                let n = (r * c).max(1) as f64;
                acc(*x, Matrix::filled(r, c, g.item() / n));
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Standardize { x, groups, eps } => {
                let vx = self.val(*x);
                let size = vx.cols() / groups;
                let m = size as f64;
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    for grp in 0..*groups {
                        let range = grp * size..(grp + 1) * size;
                        let (_, inv) = group_stats(&vx.row(r)[range.clone()], *eps);
                        let yh = &y.row(r)[range.clone()];
                        let gh = &g.row(r)[range.clone()];
                        let sum_g: f64 = gh.iter().sum();
                        let sum_gy: f64 = gh.iter().zip(yh).map(|(a, b)| a * b).sum();
                        let out = &mut dx.row_mut(r)[range];
                        for j in 0..size {
                            out[j] = inv / m * (m * gh[j] - sum_g - yh[j] * sum_gy);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::DepthwiseConv {
                x,
                kernel,
                dilation,
            } => {
                let (vx, vk) = (self.val(*x), self.val(*kernel));
                let (t_len, channels, k) = (vx.rows(), vx.cols(), vk.rows());
                let half = (k / 2) as isize;
                let mut dx = Matrix::zeros(t_len, channels);
                let mut dk = Matrix::zeros(k, channels);
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + (j as isize - half) * *dilation as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..channels {
                            let gv = g[(t, c)];
                            dx[(src, c)] += gv * vk[(j, c)];
                            dk[(j, c)] += gv * vx[(src, c)];
                        }
                    }
                }
                acc(*x, dx);
                acc(*kernel, dk);
            }
            Op::Frames { x, src, window } => {
                let vx = self.val(*x);
                let (t_len, channels) = vx.shape();
                let win = window.len();
                let n_frames = src.len() / win;
                let mut dx = Matrix::zeros(t_len, channels);
                for c in 0..channels {
                    for f in 0..n_frames {
                        let gr = g.row(c * n_frames + f);
                        for j in 0..win {
                            dx[(src[f * win + j], c)] += window[j] * gr[j];
                        }
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

/// Source sample for every `(frame, tap)` pair, flattened frame-major.
pub(crate) fn frame_sources(t_len: usize, win: usize, hop: usize) -> Vec<usize> {
    let pad = (win / 2) as isize;
    let padded = t_len + 2 * pad as usize;
    if win == 0 || hop == 0 || padded < win || t_len == 0 {
        return Vec::new();
    }
    let n_frames = (padded - win) / hop + 1;
    let reflect = |i: isize| -> usize {
        let n = t_len as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m >= n { period - m } else { m }) as usize
    };
    let mut out = Vec::with_capacity(n_frames * win);
    for f in 0..n_frames {
        for j in 0..win {
            out.push(reflect((f * hop + j) as isize - pad));
        }
    }
    out
}

fn group_stats(values: &[f64], eps: f64) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative.
fn gelu(v: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (v + A * v * v * v);
    let t = u.tanh();
    let value = 0.5 * v * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v);
    (value, deriv)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    param_vars: Vec<Option<Var>>,
    nodes_needing_grad: Vec<bool>,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a tracked node; `None` for constants.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        if !self.nodes_needing_grad[v.0] {
            return None;
        }
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.param_vars[id.index()].and_then(|v| self.grads[v.0].as_ref())
    }

    /// Per-parameter gradients in store order; unused parameters are `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Matrix>> {
        self.param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads[v.0].take()))
            .collect()
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for id in store.ids() {
            if let Some(g) = self.param(id) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_node() {
        let mut tape = Tape::detached();
        let x = tape.input(Matrix::row_vector(&[1.0, 2.0, -3.0]));
        let sq = tape.square(x);
        let both = tape.add(sq, x);
        let loss = tape.sum(both);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(x).unwrap().as_slice(), &[3.0, 5.0, -5.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::detached();
        let c = tape.constant(Matrix::row_vector(&[1.0, 2.0]));
        let x = tape.input(Matrix::row_vector(&[3.0, 4.0]));
        let p = tape.mul(c, x);
        let loss = tape.sum(p);
        let grads = tape.backward(loss);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_is_stable() {
        let mut tape = Tape::detached();
        let x = tape.constant(Matrix::row_vector(&[1000.0, 0.0]));
        let s = tape.softmax_rows(x);
        assert_eq!(tape.value(s).as_slice(), &[1.0, 0.0]);
        let u = tape.constant(Matrix::filled(2, 4, 0.3));
        let s = tape.softmax_rows(u);
        assert!(tape.value(s).as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn frame_sources_reflect_without_edge_repeat() {
        // T=4, win=4, hop=2: padded [2 1 | 0 1 2 3 | 2 1]
        let src = frame_sources(4, 4, 2);
        assert_eq!(src, vec![2, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 1]);
    }
}
