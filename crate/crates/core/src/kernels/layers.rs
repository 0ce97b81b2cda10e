//! Differentiable building blocks used by the encoder, the keyframe
//! predictor and the denoiser.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MASKED_SCORE: f64 = -1e9;

fn shape_str(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

/// `x W + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (xs, ws) = (tape.shape(x), tape.shape(w));
    if xs.1 != ws.0 {
        return Err(Error::dim(format!(
            "linear: input {} does not match weight {}",
            shape_str(xs),
            shape_str(ws)
        )));
    }
    let y = tape.matmul(x, w);
    match b {
        None => Ok(y),
        Some(b) => {
            let bs = tape.shape(b);
            if bs != (1, ws.1) {
                return Err(Error::dim(format!(
                    "linear: bias {} does not match weight {}",
                    shape_str(bs),
                    shape_str(ws)
                )));
            }
            Ok(tape.add_row(y, b))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform init in `+-1/sqrt(d_in)` for both weight and bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.w"), Matrix::random_uniform(d_in, d_out, bound, rng));
        let bias = store.add(format!("{name}.b"), Matrix::random_uniform(1, d_out, bound, rng));
        Linear {
            weight,
            bias: Some(bias),
            d_in,
            d_out,
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.w"), Matrix::random_uniform(d_in, d_out, bound, rng));
        Linear {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        linear(tape, x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Depthwise 1-D convolution over time with dilation; `kernel` is `k x C`
/// with odd `k`, zero padding keeps the output at `T x C`.
pub fn depthwise_dilated_conv1d(tape: &mut Tape, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
    let (xs, ks) = (tape.shape(x), tape.shape(kernel));
    if ks.0 % 2 == 0 {
        return Err(Error::config(format!("convolution kernel size must be odd, got {}", ks.0)));
    }
    if dilation == 0 {
        return Err(Error::config("dilation must be >= 1"));
    }
    if xs.1 != ks.1 {
        return Err(Error::dim(format!(
            "depthwise conv: input {} has {} channels but kernel {} has {}",
            shape_str(xs),
            xs.1,
            shape_str(ks),
            ks.1
        )));
    }
    Ok(tape.depthwise_conv(x, kernel, dilation))
}

/// Per-frame group standardization followed by a per-channel affine map.
pub fn group_norm(tape: &mut Tape, x: Var, groups: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let d = tape.shape(x).1;
    if groups == 0 || !d.is_multiple_of(groups) {
        return Err(Error::config(format!("{d} channels are not divisible into {groups} groups")));
    }
    if tape.shape(gain) != (1, d) || tape.shape(bias) != (1, d) {
        return Err(Error::dim(format!(
            "group_norm: gain {} and bias {} must be 1x{d}",
            shape_str(tape.shape(gain)),
            shape_str(tape.shape(bias))
        )));
    }
    let z = tape.standardize(x, groups, eps);
    let z = tape.mul_row(z, gain);
    Ok(tape.add_row(z, bias))
}

/// First half of the columns gated by the sigmoid of the second half.
pub fn glu(tape: &mut Tape, x: Var) -> Result<Var> {
    let cols = tape.shape(x).1;
    if !cols.is_multiple_of(2) {
        return Err(Error::dim(format!("glu needs an even column count, got {cols}")));
    }
    let half = cols / 2;
    let value = tape.slice_cols(x, 0, half);
    let gate = tape.slice_cols(x, half, half);
    let gate = tape.sigmoid(gate);
    Ok(tape.mul(value, gate))
}

pub fn softmax_rows(tape: &mut Tape, x: Var) -> Var {
    tape.softmax_rows(x)
}

/// `gamma * x + beta`; `gamma` and `beta` are either the shape of `x` or a
/// single `1 x D` row broadcast over frames.
pub fn film(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let xs = tape.shape(x);
    let scaled = match tape.shape(gamma) {
        s if s == xs => tape.mul(x, gamma),
        (1, d) if d == xs.1 => tape.mul_row(x, gamma),
        s => {
            return Err(Error::dim(format!(
                "film: gamma {} cannot modulate features {}",
                shape_str(s),
                shape_str(xs)
            )))
        }
    };
    match tape.shape(beta) {
        s if s == xs => Ok(tape.add(scaled, beta)),
        (1, d) if d == xs.1 => Ok(tape.add_row(scaled, beta)),
        s => Err(Error::dim(format!(
            "film: beta {} cannot shift features {}",
            shape_str(s),
            shape_str(xs)
        ))),
    }
}

/// Averaging matrix (`t_out x t_in`) for [`windowed_mean_pool`].
///
/// Output `i` maps to input position `c = (i + 0.5) * t_in / t_out - 0.5` and
/// averages input frames `j` with `c - w/2 <= j < c + w/2`, clipped to the
/// sequence. If that window holds no frame, the nearest frame is used.
pub fn pool_matrix(t_in: usize, t_out: usize, window_frames: f64) -> Matrix {
    let mut p = Matrix::zeros(t_out, t_in);
    let ratio = t_in as f64 / t_out as f64;
    for i in 0..t_out {
        let c = (i as f64 + 0.5) * ratio - 0.5;
        let lo = (c - window_frames / 2.0).ceil().max(0.0) as usize;
        let hi_excl = (c + window_frames / 2.0).ceil().min(t_in as f64).max(0.0) as usize;
        let (lo, hi_excl) = if lo < hi_excl {
            (lo, hi_excl)
        } else {
            let near = (c.round().max(0.0) as usize).min(t_in - 1);
            (near, near + 1)
        };
        let w = 1.0 / (hi_excl - lo) as f64;
        for j in lo..hi_excl {
            p[(i, j)] = w;
        }
    }
    p
}

/// Mean pooling over a centered window of `window_seconds`, resampling the
/// `T_in` frames at `frame_rate` to `out_len` frames.
pub fn windowed_mean_pool(
    tape: &mut Tape,
    x: Var,
    window_seconds: f64,
    frame_rate: f64,
    out_len: usize,
) -> Result<Var> {
    if out_len < 1 {
        return Err(Error::config("pooling output length must be >= 1"));
    }
    if !(window_seconds > 0.0 && frame_rate > 0.0) {
        return Err(Error::config(format!(
            "pooling window {window_seconds} s at {frame_rate} Hz must be positive"
        )));
    }
    let t_in = tape.shape(x).0;
    if t_in == 0 {
        return Err(Error::dim("cannot pool an empty sequence"));
    }
    let p = tape.constant(pool_matrix(t_in, out_len, window_seconds * frame_rate));
    Ok(tape.matmul(p, x))
}

/// Whether attention may look at later positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Masking {
    None,
    Causal,
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let wq = store.add(format!("{name}.wq"), Matrix::random_uniform(dim, dim, bound, rng));
        let wk = store.add(format!("{name}.wk"), Matrix::random_uniform(dim, dim, bound, rng));
        let wv = store.add(format!("{name}.wv"), Matrix::random_uniform(dim, dim, bound, rng));
        let out = Linear::new(store, &format!("{name}.wo"), dim, dim, rng);
        Ok(Attention {
            wq,
            wk,
            wv,
            out,
            dim,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, queries: Var, keys_values: Var, masking: Masking) -> Result<Var> {
        let wq = tape.param(self.wq);
        let wk = tape.param(self.wk);
        let wv = tape.param(self.wv);
        let wo = tape.param(self.out.weight);
        let bo = self.out.bias.map(|b| tape.param(b));
        multi_head_cross_attention(tape, queries, keys_values, self.heads, [wq, wk, wv, wo], bo, masking)
    }

    /// Zeroes the output projection so the block starts as an identity
    /// residual.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for id in self.out.params() {
            store.value_mut(id).fill(0.0);
        }
    }
}

/// `softmax(Q K^T / sqrt(d)) V` per head with `d = D / heads`, heads
/// concatenated and projected by `W^O`.
///
/// `proj` holds `[W^Q, W^K, W^V, W^O]`, each `D x D`.
pub fn multi_head_cross_attention(
    tape: &mut Tape,
    queries: Var,
    keys_values: Var,
    heads: usize,
    proj: [Var; 4],
    out_bias: Option<Var>,
    masking: Masking,
) -> Result<Var> {
    let (tq, d) = tape.shape(queries);
    let (tk, dk) = tape.shape(keys_values);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("dimension {d} is not divisible by {heads} heads")));
    }
    if d != dk {
        return Err(Error::dim(format!(
            "attention: queries {} and keys {} differ in width",
            shape_str((tq, d)),
            shape_str((tk, dk))
        )));
    }
    for &w in &proj {
        if tape.shape(w) != (d, d) {
            return Err(Error::dim(format!(
                "attention projection {} must be {d}x{d}",
                shape_str(tape.shape(w))
            )));
        }
    }
    if masking == Masking::Causal && tq != tk {
        return Err(Error::dim("causal attention needs equal query and key lengths"));
    }
    let [wq, wk, wv, wo] = proj;
    let q = tape.matmul(queries, wq);
    let k = tape.matmul(keys_values, wk);
    let v = tape.matmul(keys_values, wv);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = (masking == Masking::Causal).then(|| {
        tape.constant(Matrix::from_fn(tq, tk, |i, j| if j > i { MASKED_SCORE } else { 0.0 }))
    });

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m);
        }
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh));
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    linear(tape, joined, wo, out_bias)
}

/// `linear(D -> 4D) -> GELU -> linear(4D -> D)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, 4 * dim, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * dim, dim, rng),
        }
    }

    pub fn inner(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }

    /// `x + inner(x)`
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.inner(tape, x)?;
        Ok(tape.add(x, h))
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        for id in self.down.params() {
            store.value_mut(id).fill(0.0);
        }
    }
}

/// Group norm with a single group, i.e. per-frame layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        group_norm(tape, x, 1, g, b, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub size: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), Matrix::random_normal(size, dim, 0.02_f64.max(1.0 / (dim as f64).sqrt()), rng)),
            size,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.size) {
            return Err(Error::Range(format!("embedding id {bad} outside table of {}", self.size)));
        }
        let t = tape.param(self.table);
        Ok(tape.gather_rows(t, ids))
    }
}

/// Inverted dropout; the mask is a constant on the tape.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut impl Rng) -> Var {
    if p <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 - p;
    let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Standard sinusoidal encoding of a (possibly fractional) position.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    out
}

/// `len x dim` matrix of [`sinusoidal`] rows for positions `0..len`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for t in 0..len {
        m.row_mut(t).copy_from_slice(&sinusoidal(t as f64, dim));
    }
    m
}
