//! Forward and backward passes of the individual layers. Every forward
//! returns the values its backward needs; backwards accumulate parameter
//! gradients into a same-shaped accumulator and return the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Attention, FeedForward, LayerNorm, Linear, Scalar};

const LN_EPS: f64 = 1e-5;

pub fn linear_fwd<F: Scalar>(p: &Linear<F>, x: &ArrayView2<F>) -> Array2<F> {
    let mut y = x.dot(&p.w);
    y += &p.b;
    y
}

pub fn linear_bwd<F: Scalar>(
    p: &Linear<F>,
    g: &mut Linear<F>,
    x: &ArrayView2<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), dy, F::one(), &mut g.w);
    g.b += &dy.sum_axis(Axis(0));
    dy.dot(&p.w.t())
}

pub struct NormCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub fn norm_fwd<F: Scalar>(p: &LayerNorm<F>, x: &Array2<F>) -> (Array2<F>, NormCache<F>) {
    let d = F::c(x.ncols() as f64);
    let eps = F::c(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *inv = F::one() / (var + eps).sqrt();
        row *= *inv;
    }
    let mut y = &xhat * &p.gain;
    y += &p.bias;
    (y, NormCache { xhat, inv_std })
}

pub fn norm_bwd<F: Scalar>(
    p: &LayerNorm<F>,
    g: &mut LayerNorm<F>,
    cache: &NormCache<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let d = F::c(dy.ncols() as f64);
    let mut dx = dy * &p.gain;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row).and(&xhat).for_each(|r, &xh| {
            *r = inv * (*r - mean_d - xh * mean_dx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    let u = F::c(GELU_C) * (x + F::c(GELU_A) * x * x * x);
    half * x * (F::one() + u.fast_tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    let u = F::c(GELU_C) * (x + F::c(GELU_A) * x * x * x);
    let t = u.fast_tanh();
    let du = F::c(GELU_C) * (F::one() + F::c(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

pub struct FfCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

pub fn ff_fwd<F: Scalar>(p: &FeedForward<F>, x: &Array2<F>) -> (Array2<F>, FfCache<F>) {
    let pre = linear_fwd(&p.up, &x.view());
    let act = pre.mapv(gelu);
    let y = linear_fwd(&p.down, &act.view());
    (
        y,
        FfCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

pub fn ff_bwd<F: Scalar>(
    p: &FeedForward<F>,
    g: &mut FeedForward<F>,
    cache: &FfCache<F>,
    dy: &Array2<F>,
) -> Array2<F> {
    let mut dact = linear_bwd(&p.down, &mut g.down, &cache.act.view(), dy);
    Zip::from(&mut dact)
        .and(&cache.pre)
        .for_each(|d, &x| *d *= gelu_grad(x));
    linear_bwd(&p.up, &mut g.up, &cache.x.view(), &dact)
}

/// Projected keys and values of an attention block's memory.
pub struct KeyValues<F> {
    pub k: Array2<F>,
    pub v: Array2<F>,
}

pub fn project_kv<F: Scalar>(p: &Attention<F>, mem: &ArrayView2<F>) -> KeyValues<F> {
    KeyValues {
        k: linear_fwd(&p.k, mem),
        v: linear_fwd(&p.v, mem),
    }
}

pub struct AttnCache<F> {
    xq: Array2<F>,
    mem: Array2<F>,
    q: Array2<F>,
    kv: KeyValues<F>,
    /// Attention weights per head, `len_q × len_k`.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

pub struct Attended<F> {
    pub out: Array2<F>,
    q: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

/// Multi-head scaled dot-product attention of queries `xq` over projected
/// memory `kv`. With `causal`, query `i` only sees keys `j <= i`.
pub fn attend<F: Scalar>(
    p: &Attention<F>,
    xq: &ArrayView2<F>,
    kv: &KeyValues<F>,
    n_heads: usize,
    causal: bool,
) -> Attended<F> {
    let q = linear_fwd(&p.q, xq);
    let (lq, d) = q.dim();
    let dh = d / n_heads;
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros((lq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&kv.k.slice(cols).t());
        let lk = scores.ncols();
        let flat = scores.as_slice_mut().expect("fresh matmul output is contiguous");
        for (i, row) in flat.chunks_exact_mut(lk).enumerate() {
            let visible = if causal { (i + 1).min(lk) } else { lk };
            softmax_in_place(&mut row[..visible], scale);
            row[visible..].fill(F::zero());
        }
        ctx.slice_mut(cols).assign(&scores.dot(&kv.v.slice(cols)));
        probs.push(scores);
    }
    let out = linear_fwd(&p.o, &ctx.view());
    Attended { out, q, probs, ctx }
}

pub fn attn_fwd<F: Scalar>(
    p: &Attention<F>,
    xq: &Array2<F>,
    mem: &Array2<F>,
    n_heads: usize,
    causal: bool,
) -> (Array2<F>, AttnCache<F>) {
    let kv = project_kv(p, &mem.view());
    let Attended { out, q, probs, ctx } = attend(p, &xq.view(), &kv, n_heads, causal);
    (
        out,
        AttnCache {
            xq: xq.clone(),
            mem: mem.clone(),
            q,
            kv,
            probs,
            ctx,
        },
    )
}

/// Returns `(d_xq, d_mem)`.
pub fn attn_bwd<F: Scalar>(
    p: &Attention<F>,
    g: &mut Attention<F>,
    cache: &AttnCache<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let n_heads = cache.probs.len();
    let d = cache.q.ncols();
    let dh = d / n_heads;
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let dctx = linear_bwd(&p.o, &mut g.o, &cache.ctx.view(), dy);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.kv.k.raw_dim());
    let mut dv = Array2::zeros(cache.kv.v.raw_dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut ds = dctx_h.dot(&cache.kv.v.slice(cols).t());
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
            let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut drow)
                .and(&prow)
                .for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.kv.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let dxq = linear_bwd(&p.q, &mut g.q, &cache.xq.view(), &dq);
    let mut dmem = linear_bwd(&p.k, &mut g.k, &cache.mem.view(), &dk);
    dmem += &linear_bwd(&p.v, &mut g.v, &cache.mem.view(), &dv);
    (dxq, dmem)
}

fn softmax_in_place<F: Scalar>(row: &mut [F], scale: F) {
    let mut max = F::neg_infinity();
    for v in row.iter_mut() {
        *v = *v * scale;
        max = max.max(*v);
    }
    // Kept apart from the sum so the exp loop vectorizes.
    for v in row.iter_mut() {
        *v = (*v - max).fast_exp();
    }
    let sum = row.iter().fold(F::zero(), |a, &v| a + v);
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Softmax in f64 over `row[lo..]`; entries before `lo` get probability 0.
pub fn softmax_from<F: Scalar>(row: ndarray::ArrayView1<F>, lo: usize) -> Vec<f64> {
    let max = row
        .iter()
        .skip(lo)
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let mut out: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(k, &v)| if k < lo { 0.0 } else { (v.to_f64() - max).exp() })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}
