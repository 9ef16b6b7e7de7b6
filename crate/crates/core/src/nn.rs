//! Tensor plumbing for the score network.
//!
//! Parameters live in a flat arena of named f64 tensors with paired gradient
//! buffers, so the optimizer, the checkpoint writer, and the finite-difference
//! harness all iterate the same storage. Layer primitives are free functions
//! in forward/backward pairs; each forward returns whatever cache its backward
//! needs. Everything is double precision — that is the configuration the
//! gradient contract (max relative error < 1e−4 against central differences)
//! is stated for.
//!
//! Batched activations are 2-D matrices of shape (B·L, C): rows are frames,
//! samples stacked. Attention is the only primitive that cares about the
//! sample boundaries; everything else is position-wise.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// One named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

/// Flat parameter arena. Insertion order is the canonical iteration order for
/// the optimizer, serialization, and gradient checks.
#[derive(Debug, Clone, Default)]
pub struct Params {
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Handle into a [`Params`] arena.
pub type ParamId = usize;

impl Params {
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        let id = self.tensors.len();
        self.tensors.push(Tensor { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id].value
    }

    /// 2-D view of a parameter (weight matrices).
    pub fn mat(&self, id: ParamId) -> ndarray::ArrayView2<'_, f64> {
        self.tensors[id]
            .value
            .view()
            .into_dimensionality()
            .expect("parameter is not 2-D")
    }

    /// 1-D view of a parameter (biases, vectors).
    pub fn vec1(&self, id: ParamId) -> ndarray::ArrayView1<'_, f64> {
        self.tensors[id]
            .value
            .view()
            .into_dimensionality()
            .expect("parameter is not 1-D")
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id].grad
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    /// Adds `g` into the gradient buffer of `id` (shape-checked).
    pub fn accumulate_grad(&mut self, id: ParamId, g: &ArrayD<f64>) {
        let tensor = &mut self.tensors[id];
        assert_eq!(tensor.grad.shape(), g.shape(), "gradient shape mismatch for {}", tensor.name);
        tensor.grad += g;
    }

    pub fn accumulate_grad2(&mut self, id: ParamId, g: &Array2<f64>) {
        self.accumulate_grad(id, &g.clone().into_dyn());
    }

    pub fn accumulate_grad1(&mut self, id: ParamId, g: &Array1<f64>) {
        self.accumulate_grad(id, &g.clone().into_dyn());
    }
}

/// Gaussian draw via Box–Muller from a seeded generator.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Matrix filled with N(0, std²) entries.
pub fn randn_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| randn(rng) * std)
}

/// Xavier-uniform weight init for a (fan_in, fan_out) matrix.
pub fn xavier_mat(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
        rng.random_range(-bound..bound)
    })
}

/// Sinusoidal feature vector of a scalar: interleaved sin/cos over `dim/2`
/// geometrically spaced frequencies from 1 down to 1/10000.
pub fn sinusoidal(x: f64, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "sinusoidal feature dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        out[2 * i] = (x * freq).sin();
        out[2 * i + 1] = (x * freq).cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x·W + b for x: (N, I), W: (I, O), b: (O).
pub fn linear_fwd(
    x: &Array2<f64>,
    w: ndarray::ArrayView2<'_, f64>,
    b: ndarray::ArrayView1<'_, f64>,
) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Returns (dx, dw, db) for the linear layer.
pub fn linear_bwd(
    x: &Array2<f64>,
    w: ndarray::ArrayView2<'_, f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// LayerNorm (non-affine)
// ---------------------------------------------------------------------------

pub const LN_EPS: f64 = 1e-6;

pub struct LnCache {
    /// Normalized activations x̂.
    pub xhat: Array2<f64>,
    /// 1/√(var + ε) per row.
    pub inv_std: Array1<f64>,
}

/// Per-row layer normalization without learned scale/shift (modulation
/// supplies those externally).
pub fn ln_fwd(x: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let c = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let mut xhat = x.clone();
    for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
        row -= m;
    }
    let var = xhat.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / c);
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    for (mut row, &s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
        row *= s;
    }
    (xhat.clone(), LnCache { xhat, inv_std })
}

/// dx for the non-affine LayerNorm.
pub fn ln_bwd(cache: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
    let c = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let xhat = cache.xhat.row(i);
        let g = dy.row(i);
        let sum_g: f64 = g.sum();
        let sum_gx: f64 = g.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
        let inv_std = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[(i, j)] = inv_std * (g[j] - sum_g / c - xhat[j] * sum_gx / c);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

pub fn silu_fwd(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *d *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

/// Activation cache of a two-layer SiLU MLP (see `mlp2_fwd` in the network
/// module): the input, the pre-activation hidden, and the activated hidden.
pub struct MlpCache {
    pub input: Array2<f64>,
    pub h_pre: Array2<f64>,
    pub h: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Softmax (row-wise)
// ---------------------------------------------------------------------------

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    y
}

/// dx given y = softmax(x) row-wise.
pub fn softmax_rows_bwd(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..y.nrows() {
        let yr = y.row(i);
        let gr = dy.row(i);
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for j in 0..y.ncols() {
            dx[(i, j)] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Multi-head bidirectional attention over per-sample frame blocks
// ---------------------------------------------------------------------------

pub struct AttnProj {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

pub struct AttnCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax weights per (sample, head): matrices of shape (L, L).
    pub attn: Vec<Array2<f64>>,
    /// Concatenated per-head outputs before the output projection.
    pub ctx: Array2<f64>,
}

/// Full bidirectional attention. `x` is (B·L, C); attention is confined to
/// each sample's L rows. Heads split the channel dimension evenly.
pub fn attention_fwd(
    params: &Params,
    proj: &AttnProj,
    x: &Array2<f64>,
    batch: usize,
    frames: usize,
    heads: usize,
) -> (Array2<f64>, AttnCache) {
    let c = x.ncols();
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = linear_fwd(x, params.mat(proj.wq), params.vec1(proj.bq));
    let k = linear_fwd(x, params.mat(proj.wk), params.vec1(proj.bk));
    let v = linear_fwd(x, params.mat(proj.wv), params.vec1(proj.bv));
    let mut ctx = Array2::zeros((batch * frames, c));
    let mut attn = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * frames..(b + 1) * frames;
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(ndarray::s![rows.clone(), cols.clone()]);
            let kh = k.slice(ndarray::s![rows.clone(), cols.clone()]);
            let vh = v.slice(ndarray::s![rows.clone(), cols.clone()]);
            let scores = qh.dot(&kh.t()) * scale;
            let a = softmax_rows(&scores);
            let oh = a.dot(&vh);
            ctx.slice_mut(ndarray::s![rows.clone(), cols.clone()]).assign(&oh);
            attn.push(a);
        }
    }
    let y = linear_fwd(&ctx, params.mat(proj.wo), params.vec1(proj.bo));
    (
        y,
        AttnCache { x: x.clone(), q, k, v, attn, ctx },
    )
}

/// Backward of [`attention_fwd`]; accumulates parameter grads and returns dx.
pub fn attention_bwd(
    params: &mut Params,
    proj: &AttnProj,
    cache: &AttnCache,
    dy: &Array2<f64>,
    batch: usize,
    frames: usize,
    heads: usize,
) -> Array2<f64> {
    let c = dy.ncols();
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let (dctx, dwo, dbo) = linear_bwd(&cache.ctx, params.mat(proj.wo), dy);
    params.accumulate_grad2(proj.wo, &dwo);
    params.accumulate_grad1(proj.bo, &dbo);

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk_ = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for b in 0..batch {
        let rows = b * frames..(b + 1) * frames;
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let a = &cache.attn[b * heads + h];
            let qh = cache.q.slice(ndarray::s![rows.clone(), cols.clone()]);
            let kh = cache.k.slice(ndarray::s![rows.clone(), cols.clone()]);
            let vh = cache.v.slice(ndarray::s![rows.clone(), cols.clone()]);
            let doh = dctx.slice(ndarray::s![rows.clone(), cols.clone()]);
            let da = doh.dot(&vh.t());
            let dvh = a.t().dot(&doh);
            let dscores = softmax_rows_bwd(a, &da) * scale;
            let dqh = dscores.dot(&kh);
            let dkh = dscores.t().dot(&qh);
            dq.slice_mut(ndarray::s![rows.clone(), cols.clone()]).assign(&dqh);
            dk_.slice_mut(ndarray::s![rows.clone(), cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![rows.clone(), cols.clone()]).assign(&dvh);
        }
    }

    let (dx_q, dwq, dbq) = linear_bwd(&cache.x, params.mat(proj.wq), &dq);
    let (dx_k, dwk, dbk) = linear_bwd(&cache.x, params.mat(proj.wk), &dk_);
    let (dx_v, dwv, dbv) = linear_bwd(&cache.x, params.mat(proj.wv), &dv);
    params.accumulate_grad2(proj.wq, &dwq);
    params.accumulate_grad1(proj.bq, &dbq);
    params.accumulate_grad2(proj.wk, &dwk);
    params.accumulate_grad1(proj.bk, &dbk);
    params.accumulate_grad2(proj.wv, &dwv);
    params.accumulate_grad1(proj.bv, &dbv);
    dx_q + dx_k + dx_v
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.tensors.iter().map(|t| ArrayD::zeros(t.value.raw_dim())).collect(),
            v: params.tensors.iter().map(|t| ArrayD::zeros(t.value.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut Params) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&tensor.grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&tensor.grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            ndarray::Zip::from(&mut tensor.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(12345)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| randn(rng) * 0.7)
    }

    /// Central finite difference of a scalar function of a matrix entry.
    fn fd<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        i: usize,
        j: usize,
        mut f: F,
    ) -> f64 {
        let h = 1e-5;
        let mut xp = x.clone();
        xp[(i, j)] += h;
        let mut xm = x.clone();
        xm[(i, j)] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        // Identically-zero gradients (e.g. a key bias, which softmax cancels)
        // leave only finite-difference noise; treat both-tiny as equal.
        if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
            return;
        }
        let denom = analytic.abs().max(numeric.abs());
        let rel = (analytic - numeric).abs() / denom;
        assert!(rel < 1e-4, "{what}: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})");
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut r = rng();
        let x = rand_mat(&mut r, 3, 4);
        let w = rand_mat(&mut r, 4, 5);
        let b = Array1::from_shape_fn(5, |_| randn(&mut r));
        // Loss: weighted sum of outputs for a generic gradient signal.
        let wgt = rand_mat(&mut r, 3, 5);
        let loss = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| {
            (linear_fwd(x, w.view(), b.view()) * &wgt).sum()
        };
        let (dx, dw, db) = linear_bwd(&x, w.view(), &wgt);
        for (i, j) in [(0, 0), (2, 3), (1, 2)] {
            assert_close(dx[(i, j)], fd(&x, i, j, |xp| loss(xp, &w, &b)), "linear dx");
            let dwn = fd(&w, j, i.min(4), |wp| loss(&x, wp, &b));
            assert_close(dw[(j, i.min(4))], dwn, "linear dw");
        }
        let h = 1e-5;
        let mut bp = b.clone();
        bp[2] += h;
        let mut bm = b.clone();
        bm[2] -= h;
        assert_close(db[2], (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h), "linear db");
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut r = rng();
        let x = rand_mat(&mut r, 3, 6);
        let wgt = rand_mat(&mut r, 3, 6);
        let loss = |x: &Array2<f64>| (ln_fwd(x).0 * &wgt).sum();
        let (_, cache) = ln_fwd(&x);
        let dx = ln_bwd(&cache, &wgt);
        for i in 0..3 {
            for j in 0..6 {
                assert_close(dx[(i, j)], fd(&x, i, j, loss), "ln dx");
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut r = rng();
        let x = rand_mat(&mut r, 4, 16);
        let (y, _) = ln_fwd(&x);
        for row in y.rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // ε slack
        }
    }

    #[test]
    fn silu_matches_finite_differences() {
        let mut r = rng();
        let x = rand_mat(&mut r, 2, 5);
        let wgt = rand_mat(&mut r, 2, 5);
        let loss = |x: &Array2<f64>| (silu_fwd(x) * &wgt).sum();
        let dx = silu_bwd(&x, &wgt);
        for i in 0..2 {
            for j in 0..5 {
                assert_close(dx[(i, j)], fd(&x, i, j, loss), "silu dx");
            }
        }
    }

    #[test]
    fn softmax_matches_finite_differences() {
        let mut r = rng();
        let x = rand_mat(&mut r, 3, 4);
        let wgt = rand_mat(&mut r, 3, 4);
        let loss = |x: &Array2<f64>| (softmax_rows(x) * &wgt).sum();
        let y = softmax_rows(&x);
        let dx = softmax_rows_bwd(&y, &wgt);
        for i in 0..3 {
            for j in 0..4 {
                assert_close(dx[(i, j)], fd(&x, i, j, loss), "softmax dx");
            }
        }
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut r = rng();
        let (batch, frames, heads, c) = (2, 3, 2, 8);
        let mut params = Params::default();
        let proj = AttnProj {
            wq: params.add("wq", xavier_mat(&mut r, c, c)),
            bq: params.add("bq", randn_mat(&mut r, 1, c, 0.5).index_axis(Axis(0), 0).to_owned().into_dyn()),
            wk: params.add("wk", xavier_mat(&mut r, c, c)),
            bk: params.add("bk", randn_mat(&mut r, 1, c, 0.5).index_axis(Axis(0), 0).to_owned().into_dyn()),
            wv: params.add("wv", xavier_mat(&mut r, c, c)),
            bv: params.add("bv", randn_mat(&mut r, 1, c, 0.5).index_axis(Axis(0), 0).to_owned().into_dyn()),
            wo: params.add("wo", xavier_mat(&mut r, c, c)),
            bo: params.add("bo", randn_mat(&mut r, 1, c, 0.5).index_axis(Axis(0), 0).to_owned().into_dyn()),
        };
        let x = rand_mat(&mut r, batch * frames, c);
        let wgt = rand_mat(&mut r, batch * frames, c);

        let loss_of = |params: &Params, x: &Array2<f64>| {
            let (y, _) = attention_fwd(params, &proj, x, batch, frames, heads);
            (y * &wgt).sum()
        };

        let (_, cache) = attention_fwd(&params, &proj, &x, batch, frames, heads);
        let dx = attention_bwd(&mut params, &proj, &cache, &wgt, batch, frames, heads);

        // Input gradient.
        for (i, j) in [(0, 0), (3, 5), (5, 7), (2, 2)] {
            assert_close(dx[(i, j)], fd(&x, i, j, |xp| loss_of(&params, xp)), "attn dx");
        }
        // Every projection parameter, spot-checked.
        let h = 1e-5;
        for id in 0..params.len() {
            let n = params.tensors[id].value.len();
            for flat in [0, n / 2, n - 1] {
                let mut pp = params.clone();
                pp.tensors[id].value.as_slice_mut().unwrap()[flat] += h;
                let mut pm = params.clone();
                pm.tensors[id].value.as_slice_mut().unwrap()[flat] -= h;
                let numeric = (loss_of(&pp, &x) - loss_of(&pm, &x)) / (2.0 * h);
                let analytic = params.tensors[id].grad.as_slice().unwrap()[flat];
                assert_close(analytic, numeric, &format!("attn {}", params.tensors[id].name));
            }
        }
    }

    #[test]
    fn adamw_lr_zero_keeps_parameters() {
        let mut r = rng();
        let mut params = Params::default();
        params.add("w", xavier_mat(&mut r, 3, 3));
        let before = params.tensors[0].value.clone();
        let mut opt = AdamW::new(&params, 0.0, 0.01);
        params.tensors[0].grad.fill(1.0);
        opt.step(&mut params);
        assert_eq!(params.tensors[0].value, before);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut params = Params::default();
        params.add("w", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let mut opt = AdamW::new(&params, 0.05, 0.0);
        for _ in 0..2000 {
            params.zero_grads();
            let g = params.tensors[0].value.clone() * 2.0;
            params.tensors[0].grad.assign(&g);
            opt.step(&mut params);
        }
        assert!(params.tensors[0].value.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn sinusoidal_features_distinguish_inputs() {
        let a = sinusoidal(0.3, 16);
        let b = sinusoidal(0.7, 16);
        assert_eq!(a.len(), 16);
        assert!((&a - &b).iter().any(|d| d.abs() > 1e-3));
        // Frequencies span 1 → 1e-4: first pair is sin/cos of x itself.
        assert!((a[0] - 0.3f64.sin()).abs() < 1e-12);
        assert!((a[1] - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn params_arena_bookkeeping() {
        let mut params = Params::default();
        let id = params.add("a", ArrayD::zeros(IxDyn(&[2, 3])));
        assert_eq!(params.id("a"), Some(id));
        assert_eq!(params.id("b"), None);
        assert_eq!(params.scalar_count(), 6);
        params.accumulate_grad2(id, &array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        params.accumulate_grad2(id, &array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        assert_eq!(params.tensors[id].grad[[1, 2]], 7.0);
        params.zero_grads();
        assert_eq!(params.tensors[id].grad[[1, 2]], 0.0);
    }
}
