//! Differentiable building blocks with hand-written backward passes.
//!
//! Activations for a batch of `B` sequences of `T` frames are stored as a
//! single `(B*T) x width` matrix, sequence-major. Every layer maps such a
//! matrix to another one and accumulates parameter gradients into a
//! zero-initialised copy of itself.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Flat access to trainable parameters in a fixed visiting order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| out.extend_from_slice(p));
        out
    }

    /// Overwrites all parameters from `src`, which must hold exactly
    /// `num_params()` values.
    fn load_flat(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.num_params(), "parameter count mismatch");
        let mut offset = 0;
        self.visit_mut(&mut |p| {
            p.copy_from_slice(&src[offset..offset + p.len()]);
            offset += p.len();
        });
    }
}

/// A differentiable map over `(B*T) x width` activations.
pub trait Layer: Params + Clone + Send + Sync {
    type Cache;

    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, Self::Cache);

    /// Returns the input gradient and adds parameter gradients into `grad`.
    fn backward(&self, cache: &Self::Cache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64>;

    fn zeros_like(&self) -> Self;

    fn apply(&self, x: &Array2<f64>, seq_len: usize) -> Array2<f64> {
        self.forward(x, seq_len).0
    }
}

fn slice_of(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_of_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn vec_of(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn vec_of_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

// ---------------------------------------------------------------------------
// Affine map

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
        Linear {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn map(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    fn backprop(&self, x: &ArrayView2<'_, f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(slice_of(&self.weight));
        f(vec_of(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(slice_of_mut(&mut self.weight));
        f(vec_of_mut(&mut self.bias));
    }
}

impl Layer for Linear {
    type Cache = Array2<f64>;

    fn forward(&self, x: &Array2<f64>, _seq_len: usize) -> (Array2<f64>, Array2<f64>) {
        (self.map(&x.view()), x.clone())
    }

    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        self.backprop(&x.view(), dy, grad)
    }

    fn zeros_like(&self) -> Self {
        Linear::zeros(self.fan_in(), self.fan_out())
    }

    fn apply(&self, x: &Array2<f64>, _seq_len: usize) -> Array2<f64> {
        self.map(&x.view())
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// The gate `0.5 * (1 + tanh(u))`, written as the equal `sigmoid(2u)`.
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp())
}

pub fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad_from_gate(x: f64, s: f64) -> f64 {
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_gate(x, gelu_gate(x))
}

// ---------------------------------------------------------------------------
// Layer normalisation over the feature axis

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub offset: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            offset: Array1::zeros(dim),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

impl Params for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(vec_of(&self.gain));
        f(vec_of(&self.offset));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(vec_of_mut(&mut self.gain));
        f(vec_of_mut(&mut self.offset));
    }
}

impl Layer for LayerNorm {
    type Cache = LayerNormCache;

    fn forward(&self, x: &Array2<f64>, _seq_len: usize) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.dot(&row) / dim;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row *= *s;
        }
        let mut y = &normalized * &self.gain;
        y += &self.offset;
        (y, LayerNormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.offset += &dy.sum_axis(Axis(0));
        let dim = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / dim;
            let mean_gx = row.dot(&xhat) / dim;
            row.zip_mut_with(&xhat, |g, &xh| *g = s * (*g - mean_g - xh * mean_gx));
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Array1::zeros(self.gain.len()),
            offset: Array1::zeros(self.offset.len()),
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention within each sequence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub heads: usize,
    /// `d -> 3d`, laid out as [queries | keys | values]
    pub qkv: Linear,
    pub out: Linear,
}

pub struct AttentionCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    /// softmax weights, one `T x T` matrix per (sequence, head)
    probs: Vec<Array2<f64>>,
    mixed: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must be divisible by heads");
        Attention {
            heads,
            qkv: Linear::new(dim, 3 * dim, rng),
            out: Linear::new(dim, dim, rng),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, 3 * dim) + Linear::param_count(dim, dim)
    }

    fn dim(&self) -> usize {
        self.out.fan_in()
    }
}

impl Params for Attention {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.qkv.visit(f);
        self.out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.qkv.visit_mut(f);
        self.out.visit_mut(f);
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Layer for Attention {
    type Cache = AttentionCache;

    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, AttentionCache) {
        let dim = self.dim();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let rows = x.nrows();
        assert_eq!(rows % seq_len, 0, "rows must be a multiple of the sequence length");
        let qkv = self.qkv.map(&x.view());
        let mut mixed = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(rows / seq_len * self.heads);
        for b in 0..rows / seq_len {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let c = h * head_dim..(h + 1) * head_dim;
                let q = qkv.slice(s![r.clone(), c.clone()]);
                let k = qkv.slice(s![r.clone(), dim + c.start..dim + c.end]);
                let v = qkv.slice(s![r.clone(), 2 * dim + c.start..2 * dim + c.end]);
                let mut p = q.dot(&k.t());
                p *= scale;
                softmax_rows(&mut p);
                mixed.slice_mut(s![r.clone(), c]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.out.map(&mixed.view());
        (
            y,
            AttentionCache {
                input: x.clone(),
                qkv,
                probs,
                mixed,
            },
        )
    }

    fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let dim = self.dim();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let rows = dy.nrows();
        let seq_len = cache.probs.first().map(|p| p.nrows()).unwrap_or(rows);
        let dmixed = self.out.backprop(&cache.mixed.view(), dy, &mut grad.out);
        let mut dqkv = Array2::zeros((rows, 3 * dim));
        let mut idx = 0;
        for b in 0..rows / seq_len {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let c = h * head_dim..(h + 1) * head_dim;
                let kc = dim + c.start..dim + c.end;
                let vc = 2 * dim + c.start..2 * dim + c.end;
                let p = &cache.probs[idx];
                idx += 1;
                let q = cache.qkv.slice(s![r.clone(), c.clone()]);
                let k = cache.qkv.slice(s![r.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![r.clone(), vc.clone()]);
                let dout = dmixed.slice(s![r.clone(), c.clone()]);

                let dp = dout.dot(&v.t());
                let dv = p.t().dot(&dout);
                // softmax backward: ds = p * (dp - rowsum(dp * p))
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    row.scaled_add(-dot, &prow);
                }
                ds *= scale;
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![r.clone(), c]).assign(&dq);
                dqkv.slice_mut(s![r.clone(), kc]).assign(&dk);
                dqkv.slice_mut(s![r.clone(), vc]).assign(&dv);
            }
        }
        self.qkv.backprop(&cache.input.view(), &dqkv, &mut grad.qkv)
    }

    fn zeros_like(&self) -> Self {
        Attention {
            heads: self.heads,
            qkv: self.qkv.zeros_like(),
            out: self.out.zeros_like(),
        }
    }
}

// ---------------------------------------------------------------------------
// Position-wise feedforward: Linear -> GELU -> Linear

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    gate: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(dim, hidden, rng),
            down: Linear::new(hidden, dim, rng),
        }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        Linear::param_count(dim, hidden) + Linear::param_count(hidden, dim)
    }
}

impl Params for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.up.visit(f);
        self.down.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}

impl Layer for FeedForward {
    type Cache = FeedForwardCache;

    fn forward(&self, x: &Array2<f64>, _seq_len: usize) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.map(&x.view());
        let gate = pre.mapv(gelu_gate);
        let hidden = &pre * &gate;
        let y = self.down.map(&hidden.view());
        (
            y,
            FeedForwardCache {
                input: x.clone(),
                pre,
                gate,
                hidden,
            },
        )
    }

    fn backward(&self, cache: &FeedForwardCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let mut dh = self.down.backprop(&cache.hidden.view(), dy, &mut grad.down);
        ndarray::Zip::from(&mut dh)
            .and(&cache.pre)
            .and(&cache.gate)
            .for_each(|g, &x, &s| *g *= gelu_grad_from_gate(x, s));
        self.up.backprop(&cache.input.view(), &dh, &mut grad.up)
    }

    fn zeros_like(&self) -> Self {
        FeedForward {
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    fn apply(&self, x: &Array2<f64>, _seq_len: usize) -> Array2<f64> {
        let hidden = self.up.map(&x.view()).mapv_into(gelu);
        self.down.map(&hidden.view())
    }
}

// ---------------------------------------------------------------------------
// Pre-norm transformer block:
//   x1 = x + attn(ln1(x)),  y = x1 + ffn(ln2(x1))

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

pub struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    ffn: FeedForwardCache,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Block {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            norm2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, ff_dim, rng),
        }
    }

    pub fn param_count(dim: usize, ff_dim: usize) -> usize {
        2 * LayerNorm::param_count(dim) + Attention::param_count(dim) + FeedForward::param_count(dim, ff_dim)
    }

    pub fn ff_dim(&self) -> usize {
        self.ffn.up.fan_out()
    }
}

impl Params for Block {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

impl Layer for Block {
    type Cache = BlockCache;

    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, BlockCache) {
        let (n1, norm1) = self.norm1.forward(x, seq_len);
        let (a, attn) = self.attn.forward(&n1, seq_len);
        let x1 = x + &a;
        let (n2, norm2) = self.norm2.forward(&x1, seq_len);
        let (f, ffn) = self.ffn.forward(&n2, seq_len);
        (
            x1 + &f,
            BlockCache {
                norm1,
                attn,
                norm2,
                ffn,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let dn2 = self.ffn.backward(&cache.ffn, dy, &mut grad.ffn);
        let dx1 = dy + &self.norm2.backward(&cache.norm2, &dn2, &mut grad.norm2);
        let dn1 = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        dx1 + &self.norm1.backward(&cache.norm1, &dn1, &mut grad.norm1)
    }

    fn zeros_like(&self) -> Self {
        Block {
            norm1: self.norm1.zeros_like(),
            attn: self.attn.zeros_like(),
            norm2: self.norm2.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }
}

// ---------------------------------------------------------------------------
// Feature extractor: per-frame affine map plus a fixed sinusoidal position signal

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub proj: Linear,
    /// `T x d`, not trainable
    pub position: Array2<f64>,
}

impl Extractor {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, dim: usize, frames: usize, rng: &mut R) -> Self {
        Extractor {
            proj: Linear::new(input_dim, dim, rng),
            position: sinusoidal_positions(frames, dim),
        }
    }

    pub fn param_count(input_dim: usize, dim: usize) -> usize {
        Linear::param_count(input_dim, dim)
    }
}

pub fn sinusoidal_positions(frames: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, dim), |(t, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = t as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Params for Extractor {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.proj.visit_mut(f);
    }
}

impl Layer for Extractor {
    type Cache = Array2<f64>;

    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, Array2<f64>) {
        (self.apply(x, seq_len), x.clone())
    }

    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        self.proj.backprop(&x.view(), dy, &mut grad.proj)
    }

    fn zeros_like(&self) -> Self {
        Extractor {
            proj: self.proj.zeros_like(),
            position: self.position.clone(),
        }
    }

    fn apply(&self, x: &Array2<f64>, seq_len: usize) -> Array2<f64> {
        assert_eq!(seq_len, self.position.nrows(), "sequence length mismatch");
        let mut y = self.proj.map(&x.view());
        for mut chunk in y.axis_chunks_iter_mut(Axis(0), seq_len) {
            chunk += &self.position;
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Classifier head: mean-pool over frames, affine map, log-softmax

/// Mean over the frames of each sequence: `(B*T) x d -> B x d`.
pub fn mean_pool(x: &Array2<f64>, seq_len: usize) -> Array2<f64> {
    let batches = x.nrows() / seq_len;
    let mut out = Array2::zeros((batches, x.ncols()));
    for (mut row, chunk) in out.rows_mut().into_iter().zip(x.axis_chunks_iter(Axis(0), seq_len)) {
        row.assign(&chunk.mean_axis(Axis(0)).expect("non-empty"));
    }
    out
}

/// Adjoint of [`mean_pool`].
pub fn mean_pool_backward(dpooled: &Array2<f64>, seq_len: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((dpooled.nrows() * seq_len, dpooled.ncols()));
    let inv = 1.0 / seq_len as f64;
    for (mut chunk, row) in dx.axis_chunks_iter_mut(Axis(0), seq_len).zip(dpooled.rows()) {
        chunk += &(&row * inv);
    }
    dx
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Classifier {
            linear: Linear::new(dim, classes, rng),
        }
    }

    pub fn param_count(dim: usize, classes: usize) -> usize {
        Linear::param_count(dim, classes)
    }

    pub fn classes(&self) -> usize {
        self.linear.fan_out()
    }
}

impl Params for Classifier {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.linear.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.linear.visit_mut(f);
    }
}

pub struct ClassifierCache {
    pooled: Array2<f64>,
    log_probs: Array2<f64>,
    seq_len: usize,
}

impl Layer for Classifier {
    type Cache = ClassifierCache;

    /// Maps `(B*T) x d` frame features to `B x C` log-probabilities.
    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, ClassifierCache) {
        let pooled = mean_pool(x, seq_len);
        let log_probs = log_softmax_rows(&self.linear.map(&pooled.view()));
        (
            log_probs.clone(),
            ClassifierCache {
                pooled,
                log_probs,
                seq_len,
            },
        )
    }

    /// `dy` is the gradient with respect to the log-probabilities.
    fn backward(&self, cache: &ClassifierCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        // d logits = dy - softmax * rowsum(dy)
        let mut dlogits = dy.clone();
        for ((mut row, lp), total) in dlogits
            .rows_mut()
            .into_iter()
            .zip(cache.log_probs.rows())
            .zip(dy.sum_axis(Axis(1)))
        {
            row.zip_mut_with(&lp, |g, &l| *g -= l.exp() * total);
        }
        let dpooled = self.linear.backprop(&cache.pooled.view(), &dlogits, &mut grad.linear);
        mean_pool_backward(&dpooled, cache.seq_len)
    }

    fn zeros_like(&self) -> Self {
        Classifier {
            linear: self.linear.zeros_like(),
        }
    }
}

/// Mean negative log-likelihood and its gradient with respect to the log-probabilities.
pub fn nll(log_probs: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = log_probs.nrows() as f64;
    let mut grad = Array2::zeros(log_probs.dim());
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        loss -= log_probs[[row, label]];
        grad[[row, label]] = -1.0 / b;
    }
    (loss / b, grad)
}

/// Mean squared error over all elements and its gradient with respect to `pred`.
pub fn mse(pred: &Array2<f64>, target: &ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let count = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
    (loss, diff * (2.0 / count))
}
