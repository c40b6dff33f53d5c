//! Diffusion transformer denoiser: noisy latent tokens get learnable
//! positions, a timestep token is prepended, and a stack of pre-norm blocks
//! (self-attention, cross-attention over the condition, MLP) predicts the
//! added noise.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::conditioning::{add_positions, ConditionMatrix};
use crate::error::{Error, Result};
use crate::nn::layers::{
    attention_bwd, attention_fwd, attention_init, gelu, gelu_grad, layer_norm_bwd,
    layer_norm_fwd, layer_norm_init, linear_bwd, linear_fwd, linear_init, linear_zero_init,
    silu, silu_grad, AttnCache, LayerNormCache,
};
use crate::nn::{check_finite, Grads, Params, RngStream};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DiTConfig {
    pub depth: usize,
    pub heads: usize,
    /// Latent token width (audio channels folded into the VAE latent dim).
    pub token_dim: usize,
    /// Condition feature width.
    pub cond_dim: usize,
    pub mlp_ratio: f64,
    /// Capacity of the latent position table.
    pub max_tokens: usize,
    /// Capacity of the condition position table.
    pub max_cond_len: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            token_dim: 128,
            cond_dim: 11,
            mlp_ratio: 4.0,
            max_tokens: 1500,
            max_cond_len: 480,
        }
    }
}

impl DiTConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.token_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("dit depth must be >= 1".into()));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} must be divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.token_dim % 2 != 0 {
            return Err(Error::Config("token_dim must be even for the sinusoid".into()));
        }
        if self.max_tokens == 0 || self.max_cond_len == 0 || self.cond_dim == 0 {
            return Err(Error::Config("dit capacities must be positive".into()));
        }
        Ok(())
    }

    pub fn final_block_prefix(&self) -> String {
        format!("dit.b{}.", self.depth - 1)
    }

    /// Parameter-count report per group, a pure function of the config.
    pub fn describe(&self) -> Vec<(String, usize)> {
        let d = self.token_dim;
        let c = self.cond_dim;
        let m = self.mlp_hidden();
        let lin = |i: usize, o: usize| i * o + o;
        let mut groups = vec![
            ("dit.pe_z".to_string(), self.max_tokens * d),
            ("cond.pe_c".to_string(), self.max_cond_len * c),
            ("cond.null".to_string(), c),
            ("dit.time".to_string(), 2 * lin(d, d)),
        ];
        let block = 3 * 2 * d                              // three layer norms
            + 4 * lin(d, d)                                 // self q,k,v,o
            + 2 * lin(d, d) + 2 * lin(c, d)                 // cross q,o and k,v
            + lin(d, m) + lin(m, d); // mlp
        for b in 0..self.depth {
            groups.push((format!("dit.b{b}"), block));
        }
        groups.push(("dit.final".to_string(), 2 * d + lin(d, d)));
        groups
    }

    pub fn param_count(&self) -> usize {
        self.describe().iter().map(|(_, n)| n).sum()
    }
}

/// Register every denoiser parameter under `dit.` / `cond.`.
pub fn dit_init(params: &mut Params, cfg: &DiTConfig, rng: &mut RngStream) {
    let d = cfg.token_dim;
    let c = cfg.cond_dim;
    params.insert("dit.pe_z", (rng.normal_mat(cfg.max_tokens, d) * INIT_STD).into_dyn());
    params.insert("cond.pe_c", (rng.normal_mat(cfg.max_cond_len, c) * INIT_STD).into_dyn());
    params.insert("cond.null", (rng.normal_mat(1, c) * INIT_STD).into_dyn());
    linear_init(params, "dit.time.l1", d, d, INIT_STD, rng);
    linear_init(params, "dit.time.l2", d, d, INIT_STD, rng);
    for b in 0..cfg.depth {
        let p = format!("dit.b{b}");
        layer_norm_init(params, &format!("{p}.ln1"), d);
        attention_init(params, &format!("{p}.self"), d, d, INIT_STD, rng);
        layer_norm_init(params, &format!("{p}.ln2"), d);
        attention_init(params, &format!("{p}.cross"), d, c, INIT_STD, rng);
        layer_norm_init(params, &format!("{p}.ln3"), d);
        linear_init(params, &format!("{p}.mlp1"), d, cfg.mlp_hidden(), INIT_STD, rng);
        linear_init(params, &format!("{p}.mlp2"), cfg.mlp_hidden(), d, INIT_STD, rng);
    }
    layer_norm_init(params, "dit.final.ln", d);
    // zero-init head makes the untrained model predict zero noise
    linear_zero_init(params, "dit.final.head", d, d);
}

pub fn is_dit_param(name: &str) -> bool {
    name.starts_with("dit.") || name.starts_with("cond.")
}

/// Sinusoidal features of a (possibly fractional) timestep.
pub fn timestep_features(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

struct BlockCache {
    ln1: LayerNormCache,
    attn_self: AttnCache,
    ln2: LayerNormCache,
    attn_cross: AttnCache,
    ln3: LayerNormCache,
    mlp_in: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_act: Array2<f64>,
}

pub struct DiTCache {
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    normed: Array2<f64>,
    time_feat: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    num_tokens: usize,
    ctx: Array2<f64>,
}

fn forward_inner(
    params: &Params,
    cfg: &DiTConfig,
    z_t: &Array2<f64>,
    ctx: &Array2<f64>,
    t: f64,
) -> Result<(Array2<f64>, DiTCache)> {
    let n = z_t.nrows();
    if n > cfg.max_tokens {
        return Err(Error::SequenceTooLong { len: n, max: cfg.max_tokens });
    }
    if z_t.ncols() != cfg.token_dim {
        return Err(Error::InvalidArgument(format!(
            "latent dim {} does not match token_dim {}",
            z_t.ncols(),
            cfg.token_dim
        )));
    }

    let pe_z = params.mat("dit.pe_z");
    let tokens = z_t + &pe_z.slice(s![..n, ..]);

    // timestep token: sinusoid -> linear -> silu -> linear
    let time_feat = timestep_features(t, cfg.token_dim).insert_axis(Axis(0));
    let time_pre = linear_fwd(params, "dit.time.l1", &time_feat);
    let time_act = time_pre.mapv(silu);
    let time_tok = linear_fwd(params, "dit.time.l2", &time_act);

    let mut seq = concatenate(Axis(0), &[time_tok.view(), tokens.view()]).unwrap();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for b in 0..cfg.depth {
        let p = format!("dit.b{b}");
        let (n1, ln1) = layer_norm_fwd(params, &format!("{p}.ln1"), &seq);
        let (a1, attn_self) = attention_fwd(params, &format!("{p}.self"), &n1, &n1, cfg.heads);
        seq += &a1;
        let (n2, ln2) = layer_norm_fwd(params, &format!("{p}.ln2"), &seq);
        let (a2, attn_cross) = attention_fwd(params, &format!("{p}.cross"), &n2, ctx, cfg.heads);
        seq += &a2;
        let (n3, ln3) = layer_norm_fwd(params, &format!("{p}.ln3"), &seq);
        let mlp_pre = linear_fwd(params, &format!("{p}.mlp1"), &n3);
        let mlp_act = mlp_pre.mapv(gelu);
        let m = linear_fwd(params, &format!("{p}.mlp2"), &mlp_act);
        seq += &m;
        check_finite(&seq, &format!("dit block {b}"))?;
        blocks.push(BlockCache {
            ln1,
            attn_self,
            ln2,
            attn_cross,
            ln3,
            mlp_in: n3,
            mlp_pre,
            mlp_act,
        });
    }
    let (normed, final_ln) = layer_norm_fwd(params, "dit.final.ln", &seq);
    let out = linear_fwd(params, "dit.final.head", &normed);
    let eps_hat = out.slice(s![1.., ..]).to_owned();
    let cache = DiTCache {
        blocks,
        final_ln,
        normed,
        time_feat,
        time_pre,
        time_act,
        num_tokens: n,
        ctx: ctx.clone(),
    };
    Ok((eps_hat, cache))
}

/// Backward through the transformer. Returns `(d_z_t, d_ctx)` and accumulates
/// parameter gradients, including the position rows that were used.
pub fn dit_bwd(
    params: &Params,
    cfg: &DiTConfig,
    cache: &DiTCache,
    d_eps_hat: &Array2<f64>,
    grads: &mut Grads,
) -> (Array2<f64>, Array2<f64>) {
    let n = cache.num_tokens;
    let d = cfg.token_dim;
    let mut d_out = Array2::<f64>::zeros((n + 1, d));
    d_out.slice_mut(s![1.., ..]).assign(d_eps_hat);

    let d_normed = linear_bwd(params, "dit.final.head", &cache.normed, &d_out, grads);
    let mut d_seq = layer_norm_bwd(params, "dit.final.ln", &cache.final_ln, &d_normed, grads);

    let mut d_ctx = Array2::<f64>::zeros(cache.ctx.raw_dim());
    for b in (0..cfg.depth).rev() {
        let p = format!("dit.b{b}");
        let cacheb = &cache.blocks[b];

        // mlp branch
        let d_act = linear_bwd(params, &format!("{p}.mlp2"), &cacheb.mlp_act, &d_seq, grads);
        let d_pre = &d_act * &cacheb.mlp_pre.mapv(gelu_grad);
        let d_n3 = linear_bwd(params, &format!("{p}.mlp1"), &cacheb.mlp_in, &d_pre, grads);
        d_seq += &layer_norm_bwd(params, &format!("{p}.ln3"), &cacheb.ln3, &d_n3, grads);

        // cross-attention branch
        let (d_n2, d_ctx_b) =
            attention_bwd(params, &format!("{p}.cross"), &cacheb.attn_cross, &d_seq, cfg.heads, grads);
        d_ctx += &d_ctx_b;
        d_seq += &layer_norm_bwd(params, &format!("{p}.ln2"), &cacheb.ln2, &d_n2, grads);

        // self-attention branch: query and context gradients both land on n1
        let (d_n1_q, d_n1_kv) =
            attention_bwd(params, &format!("{p}.self"), &cacheb.attn_self, &d_seq, cfg.heads, grads);
        let d_n1 = d_n1_q + d_n1_kv;
        d_seq += &layer_norm_bwd(params, &format!("{p}.ln1"), &cacheb.ln1, &d_n1, grads);
    }

    // split off the timestep token
    let d_time_tok = d_seq.slice(s![..1, ..]).to_owned();
    let d_tokens = d_seq.slice(s![1.., ..]).to_owned();

    let d_time_act = linear_bwd(params, "dit.time.l2", &cache.time_act, &d_time_tok, grads);
    let d_time_pre = &d_time_act * &cache.time_pre.mapv(silu_grad);
    let _ = linear_bwd(params, "dit.time.l1", &cache.time_feat, &d_time_pre, grads);

    let mut d_pe_z = Array2::<f64>::zeros((cfg.max_tokens, d));
    d_pe_z.slice_mut(s![..n, ..]).assign(&d_tokens);
    grads.add2("dit.pe_z", d_pe_z);

    (d_tokens, d_ctx)
}

/// Raw transformer evaluation on an explicit context matrix.
pub fn denoise_with_context(
    params: &Params,
    cfg: &DiTConfig,
    z_t: &Array2<f64>,
    ctx: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>> {
    forward_inner(params, cfg, z_t, ctx, t).map(|(eps, _)| eps)
}

pub fn denoise_with_context_cached(
    params: &Params,
    cfg: &DiTConfig,
    z_t: &Array2<f64>,
    ctx: &Array2<f64>,
    t: f64,
) -> Result<(Array2<f64>, DiTCache)> {
    forward_inner(params, cfg, z_t, ctx, t)
}

/// How the condition context was built, so gradients can be routed back.
#[derive(Debug, Clone)]
pub enum ContextRoute {
    /// Condition rows with `cond.pe_c` rows added.
    Conditional { rows: usize },
    /// The learned null row repeated `rows` times.
    Null { rows: usize },
}

/// Build the cross-attention context for a raw condition matrix (adds the
/// learned positions) or for the unconditional branch (null row).
pub fn build_context(
    params: &Params,
    cfg: &DiTConfig,
    cond: Option<&ConditionMatrix>,
    null_rows: usize,
) -> Result<(Array2<f64>, ContextRoute)> {
    match cond {
        Some(c) => {
            if c.dim() != cfg.cond_dim {
                return Err(Error::InvalidArgument(format!(
                    "condition dim {} does not match configured cond_dim {}",
                    c.dim(),
                    cfg.cond_dim
                )));
            }
            let pe_c = params.mat("cond.pe_c");
            let with_pos = add_positions(c, pe_c.view())?;
            Ok((with_pos.values, ContextRoute::Conditional { rows: c.rows() }))
        }
        None => {
            let null = params.mat("cond.null");
            let mut ctx = Array2::<f64>::zeros((null_rows.max(1), cfg.cond_dim));
            for mut row in ctx.rows_mut() {
                row.assign(&null.row(0));
            }
            Ok((ctx, ContextRoute::Null { rows: null_rows.max(1) }))
        }
    }
}

/// Route a context gradient back to `cond.pe_c` or `cond.null`.
pub fn context_bwd(cfg: &DiTConfig, route: &ContextRoute, d_ctx: &Array2<f64>, grads: &mut Grads) {
    match route {
        ContextRoute::Conditional { rows } => {
            let mut d_pe = Array2::<f64>::zeros((cfg.max_cond_len, cfg.cond_dim));
            d_pe.slice_mut(s![..*rows, ..]).assign(d_ctx);
            grads.add2("cond.pe_c", d_pe);
        }
        ContextRoute::Null { .. } => {
            let summed = d_ctx.sum_axis(Axis(0)).insert_axis(Axis(0));
            grads.add2("cond.null", summed);
        }
    }
}

/// Predict the noise for a conditioned latent sequence (positions added).
pub fn denoise(
    params: &Params,
    cfg: &DiTConfig,
    z_t: &Array2<f64>,
    cond: &ConditionMatrix,
    t: f64,
) -> Result<Array2<f64>> {
    let (ctx, _) = build_context(params, cfg, Some(cond), 0)?;
    denoise_with_context(params, cfg, z_t, &ctx, t)
}

/// Unconditional branch: the learned null-condition row as the only context.
pub fn denoise_unconditional(
    params: &Params,
    cfg: &DiTConfig,
    z_t: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>> {
    let (ctx, _) = build_context(params, cfg, None, 1)?;
    denoise_with_context(params, cfg, z_t, &ctx, t)
}
