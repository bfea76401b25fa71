//! Minimal transformer building blocks with hand-written backward passes.
//!
//! Everything is f64 and operates on one token matrix (tokens x d_model) at a
//! time; batching is done by the caller. Each layer exposes
//! `forward` -> `(output, cache)` and `backward(cache, d_output, grads)`
//! where `grads` is a mirror struct of the same type accumulating parameter
//! gradients.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Borrowed view of one named parameter tensor.
pub enum TensorRef<'a> {
    M(&'a Array2<f64>),
    V(&'a Array1<f64>),
}

/// Mutable view of one named parameter tensor.
pub enum TensorMut<'a> {
    M(&'a mut Array2<f64>),
    V(&'a mut Array1<f64>),
}

/// Parameter containers expose their tensors in a stable order for
/// serialization, flattening and optimizer updates.
pub trait ParamVisit {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>));

    fn sq_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.visit("", &mut |_, t| {
            acc += match t {
                TensorRef::M(m) => m.iter().map(|v| v * v).sum::<f64>(),
                TensorRef::V(v) => v.iter().map(|v| v * v).sum::<f64>(),
            };
        });
        acc
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, t| match t {
            TensorMut::M(m) => m.fill(value),
            TensorMut::V(v) => v.fill(value),
        });
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut("", &mut |_, t| match t {
            TensorMut::M(m) => m.mapv_inplace(|v| v * s),
            TensorMut::V(v) => v.mapv_inplace(|x| x * s),
        });
    }

    /// Number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            n += match t {
                TensorRef::M(m) => m.len(),
                TensorRef::V(v) => v.len(),
            };
        });
        n
    }

    /// Concatenate all tensors (visit order) into one flat vector.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, t| match t {
            TensorRef::M(m) => out.extend(m.iter().copied()),
            TensorRef::V(v) => out.extend(v.iter().copied()),
        });
        out
    }

    /// Overwrite all tensors from a flat vector produced by [`flatten`].
    fn unflatten(&mut self, flat: &[f64]) {
        let mut idx = 0;
        self.visit_mut("", &mut |_, t| match t {
            TensorMut::M(m) => {
                for v in m.iter_mut() {
                    *v = flat[idx];
                    idx += 1;
                }
            }
            TensorMut::V(vec) => {
                for v in vec.iter_mut() {
                    *v = flat[idx];
                    idx += 1;
                }
            }
        });
        assert_eq!(idx, flat.len(), "flat parameter vector has wrong length");
    }
}

/// `a += s * b` over two containers of identical structure. Implemented via
/// flattening to keep the trait object-safe; used on the batch-summed
/// gradient once per step, not in inner loops.
pub fn add_scaled<P: ParamVisit>(a: &mut P, b: &P, s: f64) {
    let flat_b = b.flatten();
    let mut idx = 0;
    a.visit_mut("", &mut |_, t| match t {
        TensorMut::M(m) => {
            for v in m.iter_mut() {
                *v += s * flat_b[idx];
                idx += 1;
            }
        }
        TensorMut::V(vec) => {
            for v in vec.iter_mut() {
                *v += s * flat_b[idx];
                idx += 1;
            }
        }
    });
}

/// Xavier-uniform init for a (fan_in, fan_out) weight matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (in_dim, out_dim)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: xavier(in_dim, out_dim, rng),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((in_dim, out_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Backward: accumulates dW/db into `grads`, returns dX.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.w += &x.t().dot(dy);
        grads.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl ParamVisit for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        f(format!("{prefix}.w"), TensorRef::M(&self.w));
        f(format!("{prefix}.b"), TensorRef::V(&self.b));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        f(format!("{prefix}.w"), TensorMut::M(&mut self.w));
        f(format!("{prefix}.b"), TensorMut::V(&mut self.b));
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.nrows();
        let d = x.ncols();
        let mut x_hat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for (j, v) in row.iter().enumerate() {
                x_hat[[i, j]] = (v - mean) * inv;
            }
        }
        let y = &x_hat * &self.gamma + &self.beta;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grads: &mut LayerNorm,
    ) -> Array2<f64> {
        let (n, d) = dy.dim();
        grads.gamma += &(dy * &cache.x_hat).sum_axis(Axis(0));
        grads.beta += &dy.sum_axis(Axis(0));

        let mut dx = Array2::zeros((n, d));
        for i in 0..n {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..d {
                let dxh = dy[[i, j]] * self.gamma[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.x_hat[[i, j]];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for j in 0..d {
                let dxh = dy[[i, j]] * self.gamma[j];
                dx[[i, j]] = cache.inv_std[i]
                    * (dxh - mean_dxhat - cache.x_hat[[i, j]] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl ParamVisit for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        f(format!("{prefix}.gamma"), TensorRef::V(&self.gamma));
        f(format!("{prefix}.beta"), TensorRef::V(&self.beta));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        f(format!("{prefix}.gamma"), TensorMut::V(&mut self.gamma));
        f(format!("{prefix}.beta"), TensorMut::V(&mut self.beta));
    }
}

// ---------------------------------------------------------------------------
// GELU
// ---------------------------------------------------------------------------

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax attention weights per head: (heads, tokens, tokens).
    a: ndarray::Array3<f64>,
    concat: Array2<f64>,
}

impl Attention {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        Attention {
            wq: Linear::init(d_model, d_model, rng),
            wk: Linear::init(d_model, d_model, rng),
            wv: Linear::init(d_model, d_model, rng),
            wo: Linear::init(d_model, d_model, rng),
            n_heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let d = x.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);

        let mut a = ndarray::Array3::zeros((self.n_heads, n, n));
        let mut concat = Array2::zeros((n, d));
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            // Row softmax with max subtraction.
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            let oh = scores.dot(&vh);
            concat.slice_mut(ndarray::s![.., cols.clone()]).assign(&oh);
            a.index_axis_mut(Axis(0), h).assign(&scores);
        }

        let y = self.wo.forward(&concat);
        (
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                a,
                concat,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grads: &mut Attention,
    ) -> Array2<f64> {
        let n = dy.nrows();
        let d = dy.ncols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let d_concat = self.wo.backward(&cache.concat, dy, &mut grads.wo);

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let ah = cache.a.index_axis(Axis(0), h);
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let doh = d_concat.slice(ndarray::s![.., cols.clone()]);

            let da = doh.dot(&vh.t());
            let dvh = ah.t().dot(&doh);
            // Softmax backward per row: ds = a * (da - sum(da * a)).
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..n {
                    dot += da[[i, j]] * ah[[i, j]];
                }
                for j in 0..n {
                    ds[[i, j]] = ah[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            let dqh = ds.dot(&kh);
            let dkh = ds.t().dot(&qh);

            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&dvh);
        }

        let mut dx = self.wq.backward(&cache.x, &dq, &mut grads.wq);
        dx += &self.wk.backward(&cache.x, &dk, &mut grads.wk);
        dx += &self.wv.backward(&cache.x, &dv, &mut grads.wv);
        dx
    }
}

impl ParamVisit for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn init(d_model: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            lin1: Linear::init(d_model, ff_dim, rng),
            lin2: Linear::init(ff_dim, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.lin1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.lin2.forward(&act);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &FeedForwardCache,
        dy: &Array2<f64>,
        grads: &mut FeedForward,
    ) -> Array2<f64> {
        let dact = self.lin2.backward(&cache.act, dy, &mut grads.lin2);
        let dpre = &dact * &cache.pre.mapv(gelu_prime);
        self.lin1.backward(&cache.x, &dpre, &mut grads.lin1)
    }
}

impl ParamVisit for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        self.lin1.visit_mut(&format!("{prefix}.lin1"), f);
        self.lin2.visit_mut(&format!("{prefix}.lin2"), f);
    }
}

// ---------------------------------------------------------------------------
// Pre-norm encoder block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

pub struct EncoderBlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ff: FeedForwardCache,
}

impl EncoderBlock {
    pub fn init(d_model: usize, n_heads: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::init(d_model),
            attn: Attention::init(d_model, n_heads, rng),
            ln2: LayerNorm::init(d_model),
            ff: FeedForward::init(d_model, ff_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, EncoderBlockCache) {
        let (n1, ln1_cache) = self.ln1.forward(x);
        let (a, attn_cache) = self.attn.forward(&n1);
        let x2 = x + &a;
        let (n2, ln2_cache) = self.ln2.forward(&x2);
        let (f, ff_cache) = self.ff.forward(&n2);
        let y = &x2 + &f;
        (
            y,
            EncoderBlockCache {
                ln1: ln1_cache,
                attn: attn_cache,
                ln2: ln2_cache,
                ff: ff_cache,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderBlockCache,
        dy: &Array2<f64>,
        grads: &mut EncoderBlock,
    ) -> Array2<f64> {
        // y = x2 + ff(ln2(x2))
        let dn2 = self.ff.backward(&cache.ff, dy, &mut grads.ff);
        let mut dx2 = self.ln2.backward(&cache.ln2, &dn2, &mut grads.ln2);
        dx2 += dy;
        // x2 = x + attn(ln1(x))
        let dn1 = self.attn.backward(&cache.attn, &dx2, &mut grads.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dn1, &mut grads.ln1);
        dx += &dx2;
        dx
    }
}

impl ParamVisit for EncoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, TensorMut<'a>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

/// Sinusoidal positional encoding table (n_positions x d_model).
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((n, d));
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = (pos as f64 * freq).sin();
            pe[[pos, 2 * i + 1]] = (pos as f64 * freq).cos();
        }
    }
    pe
}
