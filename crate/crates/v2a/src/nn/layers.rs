//! Dense layers with explicit forward/backward passes.
//!
//! Convention: activations are `[positions, features]` matrices. A layer's
//! `*_fwd` returns the output plus whatever cache its `*_bwd` needs; backward
//! passes accumulate parameter gradients into a [`Grads`] and return the
//! gradient w.r.t. the layer input.

use ndarray::{Array1, Array2, Axis};

use super::{Grads, Params, RngStream};

/// Register a linear layer `{prefix}.w [in, out]`, `{prefix}.b [out]`.
pub fn linear_init(
    params: &mut Params,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut RngStream,
) {
    let w = rng.normal_mat(d_in, d_out) * std;
    params.insert(format!("{prefix}.w"), w.into_dyn());
    params.insert(format!("{prefix}.b"), Array1::<f64>::zeros(d_out).into_dyn());
}

pub fn linear_zero_init(params: &mut Params, prefix: &str, d_in: usize, d_out: usize) {
    params.insert(format!("{prefix}.w"), Array2::<f64>::zeros((d_in, d_out)).into_dyn());
    params.insert(format!("{prefix}.b"), Array1::<f64>::zeros(d_out).into_dyn());
}

pub fn linear_fwd(params: &Params, prefix: &str, x: &Array2<f64>) -> Array2<f64> {
    let w = params.mat(&format!("{prefix}.w"));
    let b = params.vec1(&format!("{prefix}.b"));
    x.dot(&w) + &b
}

pub fn linear_bwd(
    params: &Params,
    prefix: &str,
    x: &Array2<f64>,
    dy: &Array2<f64>,
    grads: &mut Grads,
) -> Array2<f64> {
    let w = params.mat(&format!("{prefix}.w"));
    grads.add2(&format!("{prefix}.w"), x.t().dot(dy));
    grads.add1(&format!("{prefix}.b"), dy.sum_axis(Axis(0)));
    dy.dot(&w.t())
}

pub const LN_EPS: f64 = 1e-5;

/// Register a layer norm `{prefix}.g` (ones) and `{prefix}.b` (zeros).
pub fn layer_norm_init(params: &mut Params, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.g"), Array1::<f64>::ones(dim).into_dyn());
    params.insert(format!("{prefix}.b"), Array1::<f64>::zeros(dim).into_dyn());
}

pub struct LayerNormCache {
    /// Normalized input before scale/shift.
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm_fwd(
    params: &Params,
    prefix: &str,
    x: &Array2<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let g = params.vec1(&format!("{prefix}.g"));
    let b = params.vec1(&format!("{prefix}.b"));
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let mut xhat = x.clone();
    for (mut row, m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
        row -= *m;
    }
    let var = xhat.map_axis(Axis(1), |r| r.iter().map(|v| v * v).sum::<f64>() / d);
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
        row *= *s;
    }
    let y = &xhat * &g + &b;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_bwd(
    params: &Params,
    prefix: &str,
    cache: &LayerNormCache,
    dy: &Array2<f64>,
    grads: &mut Grads,
) -> Array2<f64> {
    let g = params.vec1(&format!("{prefix}.g"));
    grads.add1(&format!("{prefix}.g"), (dy * &cache.xhat).sum_axis(Axis(0)));
    grads.add1(&format!("{prefix}.b"), dy.sum_axis(Axis(0)));

    // dx = inv_std/d * (d*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)) per row
    let d = dy.ncols() as f64;
    let dxhat = dy * &g;
    let sum_dxhat = dxhat.sum_axis(Axis(1));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
    let mut dx = dxhat;
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let (s1, s2, istd) = (sum_dxhat[i], sum_dxhat_xhat[i], cache.inv_std[i]);
        let xhat_row = cache.xhat.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (istd / d) * (d * *v - s1 - xhat_row[j] * s2);
        }
    }
    dx
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row /= sum;
    }
    y
}

/// Backward through a row-wise softmax given its output `y`.
pub fn softmax_rows_bwd(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let dot = (dy * y).sum_axis(Axis(1));
    let mut dx = dy.clone();
    for (mut row, d) in dx.rows_mut().into_iter().zip(dot.iter()) {
        row -= *d;
    }
    dx * y
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Multi-head attention cache for the backward pass.
pub struct AttnCache {
    pub x: Array2<f64>,
    pub ctx: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmaxed attention weights, one `[n, m]` matrix per head.
    pub att: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
}

/// Register q/k/v/o projections. Queries read `d_model`, keys/values read
/// `d_ctx` (equal to `d_model` for self-attention).
pub fn attention_init(
    params: &mut Params,
    prefix: &str,
    d_model: usize,
    d_ctx: usize,
    std: f64,
    rng: &mut RngStream,
) {
    linear_init(params, &format!("{prefix}.q"), d_model, d_model, std, rng);
    linear_init(params, &format!("{prefix}.k"), d_ctx, d_model, std, rng);
    linear_init(params, &format!("{prefix}.v"), d_ctx, d_model, std, rng);
    linear_init(params, &format!("{prefix}.o"), d_model, d_model, std, rng);
}

/// Attention over `ctx` driven by queries from `x`; pass `x` as `ctx` for
/// self-attention. `d_model` must be divisible by `heads`.
pub fn attention_fwd(
    params: &Params,
    prefix: &str,
    x: &Array2<f64>,
    ctx: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, AttnCache) {
    let d_model = x.ncols();
    debug_assert_eq!(d_model % heads, 0);
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear_fwd(params, &format!("{prefix}.q"), x);
    let k = linear_fwd(params, &format!("{prefix}.k"), ctx);
    let v = linear_fwd(params, &format!("{prefix}.v"), ctx);

    let n = x.nrows();
    let mut concat = Array2::<f64>::zeros((n, d_model));
    let mut att = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]);
        let kh = k.slice(ndarray::s![.., cols.clone()]);
        let vh = v.slice(ndarray::s![.., cols.clone()]);
        let logits = qh.dot(&kh.t()) * scale;
        let a = softmax_rows(&logits);
        let out = a.dot(&vh);
        concat.slice_mut(ndarray::s![.., cols]).assign(&out);
        att.push(a);
    }
    let y = linear_fwd(params, &format!("{prefix}.o"), &concat);
    let cache = AttnCache {
        x: x.clone(),
        ctx: ctx.clone(),
        q,
        k,
        v,
        att,
        concat,
    };
    (y, cache)
}

/// Returns `(dx, dctx)`. For self-attention the caller adds them.
pub fn attention_bwd(
    params: &Params,
    prefix: &str,
    cache: &AttnCache,
    dy: &Array2<f64>,
    heads: usize,
    grads: &mut Grads,
) -> (Array2<f64>, Array2<f64>) {
    let d_model = cache.x.ncols();
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dconcat = linear_bwd(params, &format!("{prefix}.o"), &cache.concat, dy, grads);

    let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let a = &cache.att[h];
        let dout = dconcat.slice(ndarray::s![.., cols.clone()]);
        let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
        let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
        let qh = cache.q.slice(ndarray::s![.., cols.clone()]);

        let da = dout.dot(&vh.t());
        dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&a.t().dot(&dout));
        let dlogits = softmax_rows_bwd(a, &da) * scale;
        dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dlogits.dot(&kh));
        dk.slice_mut(ndarray::s![.., cols]).assign(&dlogits.t().dot(&qh));
    }

    let dx = linear_bwd(params, &format!("{prefix}.q"), &cache.x, &dq, grads);
    let mut dctx = linear_bwd(params, &format!("{prefix}.k"), &cache.ctx, &dk, grads);
    dctx += &linear_bwd(params, &format!("{prefix}.v"), &cache.ctx, &dv, grads);
    (dx, dctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;

    fn finite_diff_input<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        mut f: F,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::<f64>::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn setup() -> (Params, RngStream) {
        (Params::new(), RngStream::new(42, "test"))
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (mut p, mut rng) = setup();
        linear_init(&mut p, "l", 3, 2, 0.5, &mut rng);
        let x = rng.normal_mat(4, 3);
        let loss = |p: &Params, x: &Array2<f64>| linear_fwd(p, "l", x).iter().map(|v| v * v).sum::<f64>();

        let y = linear_fwd(&p, "l", &x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = Grads::new();
        let dx = linear_bwd(&p, "l", &x, &dy, &mut grads);

        let dx_fd = finite_diff_input(&x, |x| loss(&p, x));
        for (a, b) in dx.iter().zip(dx_fd.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        // weight gradient check on one entry
        let h = 1e-6;
        let mut pp = p.clone();
        *pp.get_mut("l.w").unwrap().get_mut([1, 0]).unwrap() += h;
        let mut pm = p.clone();
        *pm.get_mut("l.w").unwrap().get_mut([1, 0]).unwrap() -= h;
        let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
        let gw = grads.get("l.w").unwrap()[[1, 0]];
        assert!((fd - gw).abs() < 1e-5, "{fd} vs {gw}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let (mut p, mut rng) = setup();
        layer_norm_init(&mut p, "ln", 5);
        // non-trivial gamma/beta
        *p.get_mut("ln.g").unwrap() = (rng.normal_vec(5) * 0.3 + 1.0).into_dyn();
        *p.get_mut("ln.b").unwrap() = (rng.normal_vec(5) * 0.2).into_dyn();
        let x = rng.normal_mat(3, 5);

        let loss = |p: &Params, x: &Array2<f64>| {
            let (y, _) = layer_norm_fwd(p, "ln", x);
            y.iter().enumerate().map(|(i, v)| v * v * (i as f64 * 0.1 + 1.0)).sum::<f64>()
        };
        let (y, cache) = layer_norm_fwd(&p, "ln", &x);
        let dy = Array2::from_shape_fn(y.raw_dim(), |(r, c)| {
            let i = r * y.ncols() + c;
            2.0 * y[[r, c]] * (i as f64 * 0.1 + 1.0)
        });
        let mut grads = Grads::new();
        let dx = layer_norm_bwd(&p, "ln", &cache, &dy, &mut grads);
        let dx_fd = finite_diff_input(&x, |x| loss(&p, x));
        for (a, b) in dx.iter().zip(dx_fd.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let (mut p, mut rng) = setup();
        attention_init(&mut p, "at", 4, 3, 0.4, &mut rng);
        let x = rng.normal_mat(5, 4);
        let ctx = rng.normal_mat(2, 3);

        let loss = |p: &Params, x: &Array2<f64>, ctx: &Array2<f64>| {
            let (y, _) = attention_fwd(p, "at", x, ctx, 2);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = attention_fwd(&p, "at", &x, &ctx, 2);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = Grads::new();
        let (dx, dctx) = attention_bwd(&p, "at", &cache, &dy, 2, &mut grads);

        let dx_fd = finite_diff_input(&x, |x| loss(&p, x, &ctx));
        for (a, b) in dx.iter().zip(dx_fd.iter()) {
            assert!((a - b).abs() < 1e-5, "dx {a} vs {b}");
        }
        let dctx_fd = finite_diff_input(&ctx, |c| loss(&p, &x, c));
        for (a, b) in dctx.iter().zip(dctx_fd.iter()) {
            assert!((a - b).abs() < 1e-5, "dctx {a} vs {b}");
        }
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            assert!((gelu_grad(x) - (gelu(x + h) - gelu(x - h)) / (2.0 * h)).abs() < 1e-7);
            assert!((silu_grad(x) - (silu(x + h) - silu(x - h)) / (2.0 * h)).abs() < 1e-7);
            // elu's second derivative jumps at 0, so the central difference
            // is only O(h) accurate there
            assert!((elu_grad(x) - (elu(x + h) - elu(x - h)) / (2.0 * h)).abs() < 1e-6);
        }
    }
}
