//! Dense building blocks with explicit forward caches and backward passes.
//!
//! Token sequences are `T x D` matrices, one row per token. Every `backward`
//! accumulates parameter gradients into a same-shaped gradient struct and
//! returns the gradient with respect to its input.

use ndarray::{s, Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) fn normal(rng: &mut Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn normal_vec(rng: &mut Rng, len: usize, std: f64) -> Array1<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_fn(len, |_| dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// Normal weights with standard deviation `gain / sqrt(in)`, zero bias.
    pub fn init(input: usize, output: usize, gain: f64, rng: &mut Rng) -> Self {
        Self {
            w: normal(rng, (input, output), gain / (input as f64).sqrt()),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, g: &mut LayerNorm) -> Array2<f64> {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_dh = dh.sum() / d;
            let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let inv = cache.inv_std[i];
            for j in 0..out.len() {
                out[j] = inv * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl Attention {
    pub fn init(dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            q: Linear::init(dim, dim, 1.0, rng),
            k: Linear::init(dim, dim, 1.0, rng),
            v: Linear::init(dim, dim, 1.0, rng),
            o: Linear::init(dim, dim, 1.0, rng),
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            o: Linear::zeros(dim, dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (t, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let mut concat = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(&concat);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, g: &mut Attention) -> Array2<f64> {
        let (t, d) = cache.x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.o.backward(&cache.concat, dy, &mut g.o);
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.probs[h];
            let dout = dconcat.slice(cols);
            let da = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let mut ds = da;
            for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot: f64 = drow.iter().zip(arow.iter()).map(|(x, y)| x * y).sum();
                for (dv_, av) in drow.iter_mut().zip(arow.iter()) {
                    *dv_ = av * (*dv_ - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.q.backward(&cache.x, &dq, &mut g.q);
        dx += &self.k.backward(&cache.x, &dk, &mut g.k);
        dx += &self.v.backward(&cache.x, &dv, &mut g.v);
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn init(dim: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::init(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, 1.0, rng),
            fc2: Linear::init(hidden, dim, 1.0, rng),
        }
    }

    pub fn zeros(dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(dim),
            attn: Attention::zeros(dim, heads),
            ln2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    /// Zero the output projections of both residual branches, turning the
    /// block into the identity map.
    pub fn zero_residual_branches(&mut self) {
        self.attn.o.w.fill(0.0);
        self.attn.o.b.fill(0.0);
        self.fc2.w.fill(0.0);
        self.fc2.b.fill(0.0);
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1);
        let x1 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x1);
        let pre = self.fc1.forward(&h2);
        let act = pre.mapv(gelu);
        let out = &x1 + &self.fc2.forward(&act);
        (
            out,
            BlockCache {
                ln1,
                attn,
                ln2,
                h2,
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, g: &mut Block) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.act, dy, &mut g.fc2);
        let dpre = dact * &cache.pre.mapv(gelu_grad);
        let dh2 = self.fc1.backward(&cache.h2, &dpre, &mut g.fc1);
        let mut dx1 = dy + &self.ln2.backward(&cache.ln2, &dh2, &mut g.ln2);
        let dh1 = self.attn.backward(&cache.attn, &dx1, &mut g.attn);
        dx1 += &self.ln1.backward(&cache.ln1, &dh1, &mut g.ln1);
        dx1
    }
}
