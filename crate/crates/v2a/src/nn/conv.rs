//! Strided 1-D convolution, plus nearest-neighbour upsampling.
//!
//! Signals are `[length, channels]` matrices. The convolution is computed as
//! one matmul per kernel offset over strided views of the padded input, so
//! no patch matrix is ever materialized. With kernel 2s+1, padding s and
//! stride s, an input whose length is a multiple of `s` maps to exactly
//! `len / s` output steps, which is what keeps encode/decode lengths exact.

use ndarray::{s, Array1, Array2, Axis};

use super::{Grads, Params, RngStream};

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Overlapping downsampler: kernel 2s+1, pad s.
    pub fn down(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self { c_in, c_out, kernel: 2 * stride + 1, stride, pad: stride }
    }

    /// Length-preserving conv used after upsampling.
    pub fn same(c_in: usize, c_out: usize, kernel: usize) -> Self {
        debug_assert_eq!(kernel % 2, 1);
        Self { c_in, c_out, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Weight layout groups by kernel offset: `{prefix}.w [kernel * c_in, c_out]`
/// where rows `i*c_in..(i+1)*c_in` belong to offset `i`; `{prefix}.b [c_out]`.
pub fn conv1d_init(params: &mut Params, prefix: &str, spec: ConvSpec, rng: &mut RngStream) {
    let fan_in = (spec.c_in * spec.kernel) as f64;
    let w = rng.normal_mat(spec.kernel * spec.c_in, spec.c_out) * (1.0 / fan_in).sqrt();
    params.insert(format!("{prefix}.w"), w.into_dyn());
    params.insert(format!("{prefix}.b"), Array1::<f64>::zeros(spec.c_out).into_dyn());
}

fn pad_input(x: &Array2<f64>, pad: usize) -> Array2<f64> {
    if pad == 0 {
        return x.clone();
    }
    let mut xp = Array2::<f64>::zeros((x.nrows() + 2 * pad, x.ncols()));
    xp.slice_mut(s![pad..pad + x.nrows(), ..]).assign(x);
    xp
}

pub struct ConvCache {
    /// Zero-padded input.
    pub padded: Array2<f64>,
    pub in_len: usize,
    pub spec: ConvSpec,
}

pub fn conv1d_fwd(
    params: &Params,
    prefix: &str,
    x: &Array2<f64>,
    spec: ConvSpec,
) -> (Array2<f64>, ConvCache) {
    debug_assert_eq!(x.ncols(), spec.c_in);
    let w = params.mat(&format!("{prefix}.w"));
    let b = params.vec1(&format!("{prefix}.b"));
    let padded = pad_input(x, spec.pad);
    let out_len = spec.out_len(x.nrows());

    let mut y = Array2::<f64>::zeros((out_len, spec.c_out));
    y += &b;
    let span = (out_len - 1) * spec.stride + 1;
    for i in 0..spec.kernel {
        let xi = padded.slice(s![i..i + span; spec.stride, ..]);
        let wi = w.slice(s![i * spec.c_in..(i + 1) * spec.c_in, ..]);
        y += &xi.dot(&wi);
    }
    (y, ConvCache { padded, in_len: x.nrows(), spec })
}

pub fn conv1d_bwd(
    params: &Params,
    prefix: &str,
    cache: &ConvCache,
    dy: &Array2<f64>,
    grads: &mut Grads,
) -> Array2<f64> {
    let spec = cache.spec;
    let w = params.mat(&format!("{prefix}.w"));
    let out_len = dy.nrows();
    let span = (out_len - 1) * spec.stride + 1;

    let mut dw = Array2::<f64>::zeros((spec.kernel * spec.c_in, spec.c_out));
    let mut dpadded = Array2::<f64>::zeros(cache.padded.raw_dim());
    for i in 0..spec.kernel {
        let xi = cache.padded.slice(s![i..i + span; spec.stride, ..]);
        dw.slice_mut(s![i * spec.c_in..(i + 1) * spec.c_in, ..])
            .assign(&xi.t().dot(dy));
        let wi = w.slice(s![i * spec.c_in..(i + 1) * spec.c_in, ..]);
        let mut dxi = dpadded.slice_mut(s![i..i + span; spec.stride, ..]);
        dxi += &dy.dot(&wi.t());
    }
    grads.add2(&format!("{prefix}.w"), dw);
    grads.add1(&format!("{prefix}.b"), dy.sum_axis(Axis(0)));
    dpadded.slice(s![spec.pad..spec.pad + cache.in_len, ..]).to_owned()
}

/// Repeat each time step `factor` times.
pub fn upsample_fwd(x: &Array2<f64>, factor: usize) -> Array2<f64> {
    let mut y = Array2::<f64>::zeros((x.nrows() * factor, x.ncols()));
    for r in 0..factor {
        y.slice_mut(s![r..; factor, ..]).assign(x);
    }
    y
}

pub fn upsample_bwd(dy: &Array2<f64>, factor: usize) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros((dy.nrows() / factor, dy.ncols()));
    for r in 0..factor {
        dx += &dy.slice(s![r..; factor, ..]);
    }
    dx
}
