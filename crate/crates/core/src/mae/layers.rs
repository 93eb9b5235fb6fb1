//! Transformer building blocks with hand-written backward passes.
//!
//! Each layer's `forward` returns its output plus a cache; `backward`
//! consumes the cache and upstream gradient, accumulates parameter
//! gradients into a [`Grads`] and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{axpy, dot, Mat};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let w = store.add(format!("{name}.weight"), vec![out_dim, in_dim], w);
        let b = store.add(format!("{name}.bias"), vec![out_dim], vec![0.0; out_dim]);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols, self.in_dim);
        let (w, b) = (p.get(self.w), p.get(self.b));
        let mut y = Mat::zeros(x.rows, self.out_dim);
        for i in 0..x.rows {
            let xi = x.row(i);
            let yi = y.row_mut(i);
            for (o, (yo, wo)) in yi.iter_mut().zip(w.chunks_exact(self.in_dim)).enumerate() {
                *yo = b[o] + dot(xi, wo);
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dx` when `want_dx`.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &Mat, dy: &Mat, want_dx: bool) -> Option<Mat> {
        let w = p.get(self.w);
        {
            let gw = g.get_mut(self.w);
            for i in 0..x.rows {
                let (xi, dyi) = (x.row(i), dy.row(i));
                for (o, gwo) in gw.chunks_exact_mut(self.in_dim).enumerate() {
                    if dyi[o] != 0.0 {
                        axpy(dyi[o], xi, gwo);
                    }
                }
            }
        }
        {
            let gb = g.get_mut(self.b);
            for i in 0..dy.rows {
                for (gbo, d) in gb.iter_mut().zip(dy.row(i)) {
                    *gbo += d;
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = Mat::zeros(x.rows, self.in_dim);
        for i in 0..x.rows {
            let dyi = dy.row(i);
            let dxi = dx.row_mut(i);
            for (o, wo) in w.chunks_exact(self.in_dim).enumerate() {
                if dyi[o] != 0.0 {
                    axpy(dyi[o], wo, dxi);
                }
            }
        }
        Some(dx)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), vec![dim], vec![1.0; dim]);
        let beta = store.add(format!("{name}.bias"), vec![dim], vec![0.0; dim]);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, LayerNormCache) {
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let n = self.dim as f64;
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let xi = x.row(i);
            let mean = xi.iter().sum::<f64>() / n;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let (hi, yi) = (xhat.row_mut(i), &mut y.data[i * x.cols..(i + 1) * x.cols]);
            for j in 0..x.cols {
                hi[j] = (xi[j] - mean) * inv;
                yi[j] = gamma[j] * hi[j] + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &LayerNormCache, dy: &Mat) -> Mat {
        let gamma = p.get(self.gamma);
        let n = self.dim as f64;
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        let mut dxhat = vec![0.0; self.dim];
        for i in 0..dy.rows {
            let (dyi, hi) = (dy.row(i), cache.xhat.row(i));
            for j in 0..self.dim {
                dgamma[j] += dyi[j] * hi[j];
                dbeta[j] += dyi[j];
                dxhat[j] = dyi[j] * gamma[j];
            }
            let sum: f64 = dxhat.iter().sum();
            let sum_h = dot(&dxhat, hi);
            let inv = cache.inv_std[i];
            let dxi = dx.row_mut(i);
            for j in 0..self.dim {
                dxi[j] = inv / n * (n * dxhat[j] - sum - hi[j] * sum_h);
            }
        }
        axpy(1.0, &dgamma, g.get_mut(self.gamma));
        axpy(1.0, &dbeta, g.get_mut(self.beta));
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, MlpCache) {
        let pre = self.fc1.forward(p, x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.fc2.forward(p, &act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &MlpCache, dy: &Mat) -> Mat {
        let mut dact = self.fc2.backward(p, g, &cache.act, dy, true).unwrap();
        for (d, x) in dact.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_grad(*x);
        }
        self.fc1.backward(p, g, &cache.x, &dact, true).unwrap()
    }
}

/// Multi-head self-attention without masking.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Mat,
    qkv: Mat,
    /// Per head, an n×n row-stochastic matrix.
    pub probs: Vec<Mat>,
    ctx: Mat,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by {heads} heads");
        Attention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, AttentionCache) {
        let n = x.rows;
        let (d, dh) = (self.dim, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(p, x);
        let mut ctx = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let mut a = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &qkv.row(i)[qo..qo + dh];
                let row = a.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    *r = scale * dot(qi, &qkv.row(j)[ko..ko + dh]);
                    max = max.max(*r);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                row.iter_mut().for_each(|r| *r /= sum);
            }
            for i in 0..n {
                let ci = &mut ctx.data[i * d + qo..i * d + qo + dh];
                for j in 0..n {
                    axpy(a.data[i * n + j], &qkv.row(j)[vo..vo + dh], ci);
                }
            }
            probs.push(a);
        }
        let y = self.proj.forward(p, &ctx);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &AttentionCache, dy: &Mat) -> Mat {
        let n = cache.x.rows;
        let (d, dh) = (self.dim, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.proj.backward(p, g, &cache.ctx, dy, true).unwrap();
        let qkv = &cache.qkv;
        let mut dqkv = Mat::zeros(n, 3 * d);
        let mut dp = vec![0.0; n];
        for (h, a) in cache.probs.iter().enumerate() {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..n {
                let dci = &dctx.row(i)[qo..qo + dh];
                let ai = a.row(i);
                for j in 0..n {
                    dp[j] = dot(dci, &qkv.row(j)[vo..vo + dh]);
                    axpy(ai[j], dci, &mut dqkv.data[j * 3 * d + vo..j * 3 * d + vo + dh]);
                }
                let weighted: f64 = ai.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = ai[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &qkv.row(j)[ko..ko + dh];
                    axpy(ds, kj, &mut dqkv.data[i * 3 * d + qo..i * 3 * d + qo + dh]);
                    let qi = &qkv.row(i)[qo..qo + dh];
                    axpy(ds, qi, &mut dqkv.data[j * 3 * d + ko..j * 3 * d + ko + dh]);
                }
            }
        }
        self.qkv.backward(p, g, &cache.x, &dqkv, true).unwrap()
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    pub attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, mlp_hidden),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &Mat) -> (Mat, BlockCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = self.attn.forward(p, &h1);
        let mut x1 = x.clone();
        x1.add_assign(&a);
        let (h2, ln2) = self.ln2.forward(p, &x1);
        let (m, mlp) = self.mlp.forward(p, &h2);
        x1.add_assign(&m);
        (x1, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &BlockCache, dy: &Mat) -> Mat {
        let dh2 = self.mlp.backward(p, g, &cache.mlp, dy);
        let mut dx1 = self.ln2.backward(p, g, &cache.ln2, &dh2);
        dx1.add_assign(dy);
        let dh1 = self.attn.backward(p, g, &cache.attn, &dx1);
        let mut dx = self.ln1.backward(p, g, &cache.ln1, &dh1);
        dx.add_assign(&dx1);
        dx
    }
}

/// Fixed 2-D sine/cosine positional table, one row per grid cell in
/// row-major order. The first half of each row encodes the grid row, the
/// second half the grid column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Mat {
    assert_eq!(dim % 4, 0, "positional dim must be divisible by 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Mat::zeros(rows * cols, dim);
    for r in 0..rows {
        for c in 0..cols {
            let row = table.row_mut(r * cols + c);
            for (i, w) in omega.iter().enumerate() {
                row[i] = (r as f64 * w).sin();
                row[quarter + i] = (r as f64 * w).cos();
                row[2 * quarter + i] = (c as f64 * w).sin();
                row[3 * quarter + i] = (c as f64 * w).cos();
            }
        }
    }
    table
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}
