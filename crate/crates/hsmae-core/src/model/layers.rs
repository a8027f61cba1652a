//! Transformer layer primitives with hand-derived backward passes.
//!
//! Every forward function returns the activations the matching backward
//! function needs, so a training step is forward (keeping caches),
//! then backward in reverse order. Backward functions accumulate weight
//! gradients with `+=` into a caller-owned gradient container, which
//! makes batch accumulation free.

use crate::linalg::Mat;
use crate::Scalar;

use super::params::{BlockP, LinearP, NormP};

/// Variance stabilizer inside layer normalization.
pub const LN_EPS: f64 = 1e-6;

/// `y = x Wᵀ + b`.
pub fn linear<T: Scalar>(x: &Mat<T>, p: &LinearP<T>) -> Mat<T> {
    let mut y = x.matmul_nt(&p.w);
    y.add_row_bias(p.b.as_slice());
    y
}

/// Backward of [`linear`]: returns dx and accumulates dW, db.
pub fn linear_backward<T: Scalar>(
    dy: &Mat<T>,
    x: &Mat<T>,
    p: &LinearP<T>,
    grad: &mut LinearP<T>,
) -> Mat<T> {
    grad.w.add_assign(&dy.matmul_tn(x));
    let db = dy.col_sums();
    for (acc, d) in grad.b.as_mut_slice().iter_mut().zip(db) {
        *acc += d;
    }
    dy.matmul(&p.w)
}

/// Row-wise layer normalization cache: normalized rows and the inverse
/// standard deviation per row.
#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Mat<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise layer normalization `y = xhat * g + b` with population
/// variance and [`LN_EPS`].
pub fn layer_norm<T: Scalar>(x: &Mat<T>, p: &NormP<T>) -> (Mat<T>, LnCache<T>) {
    let (n, d) = x.shape();
    let dim = T::cast(d);
    let eps = T::cast(LN_EPS);
    let mut xhat = Mat::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let mut y = Mat::zeros(n, d);
    let g = p.g.as_slice();
    let b = p.b.as_slice();
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dim;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / dim;
        let inv = (var + eps).sqrt().recip();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        let yr = y.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * inv;
            yr[j] = xh[j] * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]: with `h = dy ⊙ g`,
/// `dx = inv_std · (h − mean(h) − xhat · mean(h ⊙ xhat))` per row;
/// accumulates dg = Σ dy⊙xhat and db = Σ dy.
pub fn layer_norm_backward<T: Scalar>(
    dy: &Mat<T>,
    p: &NormP<T>,
    cache: &LnCache<T>,
    grad: &mut NormP<T>,
) -> Mat<T> {
    let (n, d) = dy.shape();
    let dim = T::cast(d);
    let g = p.g.as_slice();
    let dg = grad.g.as_mut_slice();
    let db = grad.b.as_mut_slice();
    let mut dx = Mat::zeros(n, d);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_h = T::zero();
        let mut mean_hx = T::zero();
        for j in 0..d {
            let h = dyr[j] * g[j];
            mean_h += h;
            mean_hx += h * xh[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        mean_h /= dim;
        mean_hx /= dim;
        let inv = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let h = dyr[j] * g[j];
            dxr[j] = inv * (h - mean_h - xh[j] * mean_hx);
        }
    }
    dx
}

/// GELU, tanh approximation: `0.5 u (1 + tanh(c (u + a u³)))` with
/// `c = sqrt(2/π)`, `a = 0.044715`.
pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let a = T::cast(0.044715);
    let half = T::cast(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

/// Exact derivative of the tanh-approximated [`gelu`].
pub fn gelu_prime<T: Scalar>(u: T) -> T {
    let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let a = T::cast(0.044715);
    let half = T::cast(0.5);
    let three = T::cast(3.0);
    let t = (c * (u + a * u * u * u)).tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * u * sech2 * c * (T::one() + three * a * u * u)
}

/// Multi-head attention cache: the QKV projection output and per-head
/// softmax probabilities, plus the concatenated context fed to the
/// output projection.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub qkv: Mat<T>,
    /// One n×n probability matrix per head.
    pub probs: Vec<Mat<T>>,
    pub concat: Mat<T>,
}

fn col_block<T: Scalar>(m: &Mat<T>, c0: usize, width: usize) -> Mat<T> {
    let n = m.rows();
    let mut out = Mat::zeros(n, width);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&m.row(i)[c0..c0 + width]);
    }
    out
}

fn add_col_block<T: Scalar>(dst: &mut Mat<T>, c0: usize, src: &Mat<T>) {
    for i in 0..src.rows() {
        let d = &mut dst.row_mut(i)[c0..c0 + src.cols()];
        for (dv, sv) in d.iter_mut().zip(src.row(i)) {
            *dv += *sv;
        }
    }
}

fn softmax_rows<T: Scalar>(scores: &mut Mat<T>) {
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Scaled dot-product multi-head self-attention over pre-normalized
/// input: QKV projection, per-head softmax(Q Kᵀ / sqrt(head_dim)) V,
/// concatenation, output projection.
pub fn attention<T: Scalar>(
    x_norm: &Mat<T>,
    qkv_p: &LinearP<T>,
    out_p: &LinearP<T>,
    heads: usize,
) -> (Mat<T>, AttnCache<T>) {
    let (n, d) = x_norm.shape();
    let hd = d / heads;
    let scale = T::cast(1.0 / (hd as f64).sqrt());
    let qkv = linear(x_norm, qkv_p);
    let mut concat = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for k in 0..heads {
        let q = col_block(&qkv, k * hd, hd);
        let key = col_block(&qkv, d + k * hd, hd);
        let v = col_block(&qkv, 2 * d + k * hd, hd);
        let mut scores = q.matmul_nt(&key);
        scores.scale(scale);
        softmax_rows(&mut scores);
        let ctx = scores.matmul(&v);
        add_col_block(&mut concat, k * hd, &ctx);
        probs.push(scores);
    }
    let y = linear(&concat, out_p);
    (y, AttnCache { qkv, probs, concat })
}

/// Backward of [`attention`]. Returns the gradient w.r.t. `x_norm`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dy: &Mat<T>,
    x_norm: &Mat<T>,
    qkv_p: &LinearP<T>,
    out_p: &LinearP<T>,
    heads: usize,
    cache: &AttnCache<T>,
    qkv_grad: &mut LinearP<T>,
    out_grad: &mut LinearP<T>,
) -> Mat<T> {
    let (n, d) = x_norm.shape();
    let hd = d / heads;
    let scale = T::cast(1.0 / (hd as f64).sqrt());
    let d_concat = linear_backward(dy, &cache.concat, out_p, out_grad);
    let mut d_qkv = Mat::zeros(n, 3 * d);
    for k in 0..heads {
        let q = col_block(&cache.qkv, k * hd, hd);
        let key = col_block(&cache.qkv, d + k * hd, hd);
        let v = col_block(&cache.qkv, 2 * d + k * hd, hd);
        let p = &cache.probs[k];
        let d_ctx = col_block(&d_concat, k * hd, hd);

        let dv = p.matmul_tn(&d_ctx);
        let dp = d_ctx.matmul_nt(&v);
        // softmax backward per row: ds = p ⊙ (dp − Σ_j dp_j p_j)
        let mut ds = Mat::zeros(n, n);
        for i in 0..n {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            let dsr = ds.row_mut(i);
            for j in 0..n {
                dsr[j] = pr[j] * (dpr[j] - dot);
            }
        }
        ds.scale(scale);
        let dq = ds.matmul(&key);
        let dk = ds.matmul_tn(&q);
        add_col_block(&mut d_qkv, k * hd, &dq);
        add_col_block(&mut d_qkv, d + k * hd, &dk);
        add_col_block(&mut d_qkv, 2 * d + k * hd, &dv);
    }
    linear_backward(&d_qkv, x_norm, qkv_p, qkv_grad)
}

/// Two-layer GELU MLP cache.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub pre: Mat<T>,
    pub act: Mat<T>,
}

pub fn mlp<T: Scalar>(x_norm: &Mat<T>, fc1: &LinearP<T>, fc2: &LinearP<T>) -> (Mat<T>, MlpCache<T>) {
    let pre = linear(x_norm, fc1);
    let mut act = pre.clone();
    for v in act.as_mut_slice() {
        *v = gelu(*v);
    }
    let y = linear(&act, fc2);
    (y, MlpCache { pre, act })
}

pub fn mlp_backward<T: Scalar>(
    dy: &Mat<T>,
    x_norm: &Mat<T>,
    fc1: &LinearP<T>,
    fc2: &LinearP<T>,
    cache: &MlpCache<T>,
    fc1_grad: &mut LinearP<T>,
    fc2_grad: &mut LinearP<T>,
) -> Mat<T> {
    let mut d_act = linear_backward(dy, &cache.act, fc2, fc2_grad);
    for (dv, &u) in d_act.as_mut_slice().iter_mut().zip(cache.pre.iter()) {
        *dv *= gelu_prime(u);
    }
    linear_backward(&d_act, x_norm, fc1, fc1_grad)
}

/// Everything one block's backward pass needs.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    pub x_in: Mat<T>,
    pub ln1: LnCache<T>,
    pub ln1_out: Mat<T>,
    pub attn: AttnCache<T>,
    pub mid: Mat<T>,
    pub ln2: LnCache<T>,
    pub ln2_out: Mat<T>,
    pub mlp: MlpCache<T>,
}

/// Pre-norm block: `x += Attn(LN1(x)); x += MLP(LN2(x))`.
pub fn block_forward<T: Scalar>(x: Mat<T>, p: &BlockP<T>, heads: usize) -> (Mat<T>, BlockCache<T>) {
    let (ln1_out, ln1) = layer_norm(&x, &p.ln1);
    let (attn_out, attn) = attention(&ln1_out, &p.qkv, &p.out, heads);
    let mut mid = x.clone();
    mid.add_assign(&attn_out);
    let (ln2_out, ln2) = layer_norm(&mid, &p.ln2);
    let (mlp_out, mlp_cache) = mlp(&ln2_out, &p.fc1, &p.fc2);
    let mut out = mid.clone();
    out.add_assign(&mlp_out);
    (
        out,
        BlockCache {
            x_in: x,
            ln1,
            ln1_out,
            attn,
            mid,
            ln2,
            ln2_out,
            mlp: mlp_cache,
        },
    )
}

/// Backward of [`block_forward`].
pub fn block_backward<T: Scalar>(
    dy: &Mat<T>,
    p: &BlockP<T>,
    heads: usize,
    cache: &BlockCache<T>,
    grad: &mut BlockP<T>,
) -> Mat<T> {
    // residual: d_mid = dy + d(MLP path)
    let d_ln2_out = mlp_backward(
        dy,
        &cache.ln2_out,
        &p.fc1,
        &p.fc2,
        &cache.mlp,
        &mut grad.fc1,
        &mut grad.fc2,
    );
    let mut d_mid = layer_norm_backward(&d_ln2_out, &p.ln2, &cache.ln2, &mut grad.ln2);
    d_mid.add_assign(dy);

    let d_ln1_out = attention_backward(
        &d_mid,
        &cache.ln1_out,
        &p.qkv,
        &p.out,
        heads,
        &cache.attn,
        &mut grad.qkv,
        &mut grad.out,
    );
    let mut dx = layer_norm_backward(&d_ln1_out, &p.ln1, &cache.ln1, &mut grad.ln1);
    dx.add_assign(&d_mid);
    dx
}
