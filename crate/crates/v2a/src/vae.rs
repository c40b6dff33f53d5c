//! 1D-convolutional audio VAE: compresses waveforms into latent token
//! sequences and decodes them back. Trained once on the corpus, then frozen
//! for diffusion training.
//!
//! Channels are encoded independently with shared weights and folded into the
//! feature axis, so a waveform `[T, n]` becomes latent tokens `[T', n*h]`
//! with `T' = ceil(T / r)`.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::nn::conv::{conv1d_bwd, conv1d_fwd, conv1d_init, upsample_bwd, upsample_fwd, ConvCache, ConvSpec};
use crate::nn::layers::{elu, elu_grad};
use crate::nn::optim::AdamW;
use crate::nn::{Grads, Params, RngStream};
use crate::wav::Waveform;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Expected waveform channels (1 or 2).
    pub channels: usize,
    /// Latent dims per channel (h).
    pub latent_dim: usize,
    /// Downsampling stride per level; the product is the compression ratio r.
    pub strides: Vec<usize>,
    /// Hidden conv widths, one per level boundary (len = strides.len() - 1).
    pub widths: Vec<usize>,
    /// KL weight.
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            latent_dim: 32,
            strides: vec![4, 4, 4, 5],
            widths: vec![16, 32, 64],
            beta: 1e-4,
        }
    }
}

impl VaeConfig {
    /// Samples per latent step.
    pub fn ratio(&self) -> usize {
        self.strides.iter().product()
    }

    /// DiT token width after folding channels into features.
    pub fn token_dim(&self) -> usize {
        self.channels * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels > 2 {
            return Err(Error::Config("vae channels must be 1 or 2".into()));
        }
        if self.widths.len() + 1 != self.strides.len() {
            return Err(Error::Config(format!(
                "vae widths ({}) must be one shorter than strides ({})",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s < 2) || self.latent_dim == 0 {
            return Err(Error::Config("vae strides must be >= 2 and latent_dim > 0".into()));
        }
        Ok(())
    }

    fn enc_specs(&self) -> Vec<ConvSpec> {
        let mut chain = vec![1];
        chain.extend_from_slice(&self.widths);
        chain.push(2 * self.latent_dim);
        (0..self.strides.len())
            .map(|i| ConvSpec::down(chain[i], chain[i + 1], self.strides[i]))
            .collect()
    }

    /// Decoder layers in forward order: (upsample factor, conv spec).
    fn dec_specs(&self) -> Vec<(usize, ConvSpec)> {
        let levels = self.strides.len();
        let mut chain = vec![self.latent_dim];
        for i in (0..self.widths.len()).rev() {
            chain.push(self.widths[i]);
        }
        chain.push(1);
        (0..levels)
            .map(|j| {
                let stride = self.strides[levels - 1 - j];
                let kernel = 2 * stride + 1;
                (stride, ConvSpec::same(chain[j], chain[j + 1], kernel))
            })
            .collect()
    }
}

/// Register all VAE parameters under `vae.`.
pub fn vae_init(params: &mut Params, cfg: &VaeConfig, rng: &mut RngStream) {
    for (i, spec) in cfg.enc_specs().into_iter().enumerate() {
        conv1d_init(params, &format!("vae.enc{i}"), spec, rng);
    }
    for (i, (_, spec)) in cfg.dec_specs().into_iter().enumerate() {
        conv1d_init(params, &format!("vae.dec{i}"), spec, rng);
    }
}

pub fn is_vae_param(name: &str) -> bool {
    name.starts_with("vae.")
}

/// Diagonal Gaussian over latents, `[T', n*h]` mean and log-variance.
#[derive(Debug, Clone)]
pub struct VaePosterior {
    pub mean: Array2<f64>,
    pub log_variance: Array2<f64>,
}

/// Latent token sequence `[T', n*h]`.
#[derive(Debug, Clone)]
pub struct AudioLatent {
    pub values: Array2<f64>,
}

impl AudioLatent {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

struct EncCache {
    convs: Vec<ConvCache>,
    pre_acts: Vec<Array2<f64>>,
}

fn encode_channel(
    params: &Params,
    cfg: &VaeConfig,
    x: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, EncCache) {
    let specs = cfg.enc_specs();
    let last = specs.len() - 1;
    let mut h = x.clone();
    let mut convs = Vec::with_capacity(specs.len());
    let mut pre_acts = Vec::with_capacity(last);
    for (i, spec) in specs.into_iter().enumerate() {
        let (y, cache) = conv1d_fwd(params, &format!("vae.enc{i}"), &h, spec);
        convs.push(cache);
        if i < last {
            pre_acts.push(y.clone());
            h = y.mapv(elu);
        } else {
            h = y;
        }
    }
    let hdim = cfg.latent_dim;
    let mean = h.slice(s![.., ..hdim]).to_owned();
    let logvar_raw = h.slice(s![.., hdim..]).to_owned();
    (mean, logvar_raw, EncCache { convs, pre_acts })
}

fn encode_channel_bwd(
    params: &Params,
    cfg: &VaeConfig,
    cache: &EncCache,
    dmean: &Array2<f64>,
    dlogvar_raw: &Array2<f64>,
    grads: &mut Grads,
) {
    let hdim = cfg.latent_dim;
    let rows = dmean.nrows();
    let mut dh = Array2::<f64>::zeros((rows, 2 * hdim));
    dh.slice_mut(s![.., ..hdim]).assign(dmean);
    dh.slice_mut(s![.., hdim..]).assign(dlogvar_raw);

    for i in (0..cache.convs.len()).rev() {
        let dx = conv1d_bwd(params, &format!("vae.enc{i}"), &cache.convs[i], &dh, grads);
        dh = if i > 0 {
            &dx * &cache.pre_acts[i - 1].mapv(elu_grad)
        } else {
            dx
        };
    }
}

struct DecCache {
    convs: Vec<ConvCache>,
    pre_acts: Vec<Array2<f64>>,
    factors: Vec<usize>,
}

fn decode_channel(params: &Params, cfg: &VaeConfig, z: &Array2<f64>) -> (Array2<f64>, DecCache) {
    let specs = cfg.dec_specs();
    let last = specs.len() - 1;
    let mut h = z.clone();
    let mut convs = Vec::with_capacity(specs.len());
    let mut pre_acts = Vec::with_capacity(last);
    let mut factors = Vec::with_capacity(specs.len());
    for (i, (factor, spec)) in specs.into_iter().enumerate() {
        let up = upsample_fwd(&h, factor);
        let (y, cache) = conv1d_fwd(params, &format!("vae.dec{i}"), &up, spec);
        convs.push(cache);
        factors.push(factor);
        if i < last {
            pre_acts.push(y.clone());
            h = y.mapv(elu);
        } else {
            h = y;
        }
    }
    (h, DecCache { convs, pre_acts, factors })
}

fn decode_channel_bwd(
    params: &Params,
    cache: &DecCache,
    dy: &Array2<f64>,
    grads: &mut Grads,
) -> Array2<f64> {
    let mut dh = dy.clone();
    for i in (0..cache.convs.len()).rev() {
        let dup = conv1d_bwd(params, &format!("vae.dec{i}"), &cache.convs[i], &dh, grads);
        let dz = upsample_bwd(&dup, cache.factors[i]);
        dh = if i > 0 {
            &dz * &cache.pre_acts[i - 1].mapv(elu_grad)
        } else {
            dz
        };
    }
    dh
}

fn pad_to_multiple(x: &Array2<f64>, multiple: usize) -> Array2<f64> {
    let t = x.nrows();
    let padded = t.div_ceil(multiple) * multiple;
    if padded == t {
        return x.clone();
    }
    let mut out = Array2::<f64>::zeros((padded, x.ncols()));
    out.slice_mut(s![..t, ..]).assign(x);
    out
}

/// Encode a waveform into its latent posterior. Deterministic given params.
pub fn vae_encode(params: &Params, cfg: &VaeConfig, a: &Waveform) -> Result<VaePosterior> {
    if a.channels() != cfg.channels {
        return Err(Error::InvalidArgument(format!(
            "waveform has {} channels, vae trained for {}",
            a.channels(),
            cfg.channels
        )));
    }
    let padded = pad_to_multiple(&a.samples, cfg.ratio());
    let t_lat = padded.nrows() / cfg.ratio();
    let mut mean = Array2::<f64>::zeros((t_lat, cfg.token_dim()));
    let mut logvar = Array2::<f64>::zeros((t_lat, cfg.token_dim()));
    for c in 0..cfg.channels {
        let xc = padded.slice(s![.., c..c + 1]).to_owned();
        let (m, lv_raw, _) = encode_channel(params, cfg, &xc);
        let cols = c * cfg.latent_dim..(c + 1) * cfg.latent_dim;
        mean.slice_mut(s![.., cols.clone()]).assign(&m);
        logvar
            .slice_mut(s![.., cols])
            .assign(&lv_raw.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)));
    }
    crate::nn::check_finite(&mean, "vae posterior mean")?;
    Ok(VaePosterior { mean, log_variance: logvar })
}

/// Reparameterized draw: mean + exp(logvar/2) * eps, reproducible from seed.
pub fn vae_sample(posterior: &VaePosterior, seed: u64) -> AudioLatent {
    let mut rng = RngStream::new(seed, "vae-sample");
    let eps = rng.normal_mat(posterior.mean.nrows(), posterior.mean.ncols());
    let values = &posterior.mean + &(posterior.log_variance.mapv(|v| (0.5 * v).exp()) * eps);
    AudioLatent { values }
}

/// Decode latents to a waveform of exactly `T' * r` samples, clipped to [-1, 1].
pub fn vae_decode(params: &Params, cfg: &VaeConfig, z: &AudioLatent) -> Result<Waveform> {
    if z.dim() != cfg.token_dim() {
        return Err(Error::InvalidArgument(format!(
            "latent dim {} does not match vae token dim {}",
            z.dim(),
            cfg.token_dim()
        )));
    }
    let t_out = z.len() * cfg.ratio();
    let mut samples = Array2::<f64>::zeros((t_out, cfg.channels));
    for c in 0..cfg.channels {
        let cols = c * cfg.latent_dim..(c + 1) * cfg.latent_dim;
        let zc = z.values.slice(s![.., cols]).to_owned();
        let (y, _) = decode_channel(params, cfg, &zc);
        samples.slice_mut(s![.., c..c + 1]).assign(&y);
    }
    Ok(Waveform::new(samples, 0)?.clipped())
}

/// Sum over elements of KL(N(mu, sigma^2) || N(0, 1)).
pub fn gaussian_kl_sum(mean: &Array2<f64>, log_variance: &Array2<f64>) -> f64 {
    mean.iter()
        .zip(log_variance.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

/// Loss and gradients for one waveform; the KL term is averaged per latent
/// element so batches of mixed lengths stay comparable.
fn vae_example_loss(
    params: &Params,
    cfg: &VaeConfig,
    wav: &Waveform,
    sample_seed: u64,
    grads: Option<&mut Grads>,
) -> Result<VaeLoss> {
    let padded = pad_to_multiple(&wav.samples, cfg.ratio());
    let mut rng = RngStream::new(sample_seed, "vae-train-sample");

    let mut recon_total = 0.0;
    let mut kl_total = 0.0;
    let mut grads = grads;
    for c in 0..cfg.channels {
        let xc = padded.slice(s![.., c..c + 1]).to_owned();
        let (mean, logvar_raw, enc_cache) = encode_channel(params, cfg, &xc);
        let logvar = logvar_raw.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let eps = rng.normal_mat(mean.nrows(), mean.ncols());
        let std = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mean + &(&std * &eps);
        let (y, dec_cache) = decode_channel(params, cfg, &z);

        let n_samp = y.len() as f64;
        let n_lat = mean.len() as f64;
        let diff = &y - &xc;
        let recon = diff.iter().map(|v| v * v).sum::<f64>() / n_samp;
        let kl = gaussian_kl_sum(&mean, &logvar) / n_lat;
        recon_total += recon;
        kl_total += kl;

        if let Some(g) = grads.as_deref_mut() {
            let dy = &diff * (2.0 / n_samp);
            let dz = decode_channel_bwd(params, &dec_cache, &dy, g);
            // reparameterization: z = mean + exp(logvar/2)*eps
            let mut dmean = dz.clone();
            let mut dlogvar = &dz * &std * &eps * 0.5;
            // KL gradients (per-element mean, weighted by beta at the end)
            dmean += &(&mean * (cfg.beta / n_lat));
            dlogvar += &(logvar.mapv(|v| 0.5 * (v.exp() - 1.0)) * (cfg.beta / n_lat));
            // clamp passes gradient only inside the active range
            let clamp_mask = logvar_raw.mapv(|v| {
                if (LOGVAR_MIN..=LOGVAR_MAX).contains(&v) {
                    1.0
                } else {
                    0.0
                }
            });
            let dlogvar_raw = &dlogvar * &clamp_mask;
            encode_channel_bwd(params, cfg, &enc_cache, &dmean, &dlogvar_raw, g);
        }
    }
    let channels = cfg.channels as f64;
    let reconstruction = recon_total / channels;
    let kl = kl_total / channels;
    Ok(VaeLoss { reconstruction, kl, total: reconstruction + cfg.beta * kl })
}

/// One optimizer step over a batch. Returns the averaged loss breakdown.
pub fn vae_train_step(
    params: &mut Params,
    cfg: &VaeConfig,
    opt: &mut AdamW,
    batch: &[&Waveform],
    rng: &mut RngStream,
) -> Result<VaeLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty vae batch".into()));
    }
    let mut grads = Grads::new();
    let mut totals = VaeLoss { reconstruction: 0.0, kl: 0.0, total: 0.0 };
    for wav in batch {
        let seed = rng.next_u64();
        let loss = vae_example_loss(params, cfg, wav, seed, Some(&mut grads))?;
        totals.reconstruction += loss.reconstruction;
        totals.kl += loss.kl;
        totals.total += loss.total;
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    totals.reconstruction *= scale;
    totals.kl *= scale;
    totals.total *= scale;
    if !totals.total.is_finite() {
        return Err(Error::TrainingDiverged(format!(
            "vae loss is {} on a batch of {} waveforms of {} samples",
            totals.total,
            batch.len(),
            batch[0].num_samples()
        )));
    }
    let trainable: std::collections::BTreeSet<String> =
        params.names().filter(|n| is_vae_param(n)).map(String::from).collect();
    opt.apply(params, &mut grads, &trainable)?;
    Ok(totals)
}

/// 1 / std of sampled latents over a corpus; multiplying latents by this
/// brings their variance to ~1 as the forward process assumes.
pub fn latent_scale(
    params: &Params,
    cfg: &VaeConfig,
    waveforms: &[Waveform],
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    let mut rng = RngStream::new(seed, "latent-scale");
    for wav in waveforms {
        let post = vae_encode(params, cfg, wav)?;
        let z = vae_sample(&post, rng.next_u64());
        for v in z.values.iter() {
            sum += v;
            sum_sq += v * v;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let var = (sum_sq / count - mean * mean).max(1e-12);
    Ok(1.0 / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            channels: 1,
            latent_dim: 2,
            strides: vec![2, 2],
            widths: vec![3],
            beta: 0.1,
        }
    }

    fn init(cfg: &VaeConfig, seed: u64) -> Params {
        let mut p = Params::new();
        let mut rng = RngStream::new(seed, "vae-init");
        vae_init(&mut p, cfg, &mut rng);
        p
    }

    #[test]
    fn latent_length_is_ceil_t_over_r() {
        let cfg = VaeConfig::default();
        let params = init(&cfg, 0);
        // 10 s mono at 8 kHz, r = 320 -> 250 latent steps
        let wav = Waveform::mono(vec![0.1; 80_000], 8000).unwrap();
        let post = vae_encode(&params, &cfg, &wav).unwrap();
        assert_eq!(post.mean.nrows(), 250);
        assert_eq!(post.mean.ncols(), 32);
        // 1 sample pads up to one full stride
        let one = Waveform::mono(vec![0.5], 8000).unwrap();
        let post = vae_encode(&params, &cfg, &one).unwrap();
        assert_eq!(post.mean.nrows(), 1);
    }

    #[test]
    fn zero_waveform_gives_finite_posterior() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 1);
        let wav = Waveform::mono(vec![0.0; 64], 8000).unwrap();
        let post = vae_encode(&params, &cfg, &wav).unwrap();
        assert!(post.mean.iter().all(|v| v.is_finite()));
        assert!(post.log_variance.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_mismatch_is_invalid_argument() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 1);
        let stereo =
            Waveform::new(Array2::from_elem((16, 2), 0.1), 8000).unwrap();
        assert!(matches!(
            vae_encode(&params, &cfg, &stereo),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sample_determinism_and_zero_variance_limit() {
        let post = VaePosterior {
            mean: Array2::from_elem((4, 3), 0.25),
            log_variance: Array2::from_elem((4, 3), LOGVAR_MIN),
        };
        let a = vae_sample(&post, 9);
        let b = vae_sample(&post, 9);
        assert_eq!(a.values, b.values);
        for v in a.values.iter() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_variance_matches_posterior() {
        let post = VaePosterior {
            mean: Array2::from_elem((1, 1), 1.0),
            log_variance: Array2::from_elem((1, 1), -0.7),
        };
        let n = 10_000;
        let values: Vec<f64> = (0..n).map(|s| vae_sample(&post, s as u64).values[[0, 0]]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let theory = (-0.7f64).exp();
        let tol = 3.0 * theory * (2.0 / n as f64).sqrt();
        assert!((var - theory).abs() < tol, "{var} vs {theory}");
    }

    #[test]
    fn decode_length_and_clipping() {
        let cfg = VaeConfig::default();
        let params = init(&cfg, 3);
        let z = AudioLatent { values: Array2::zeros((250, 32)) };
        let wav = vae_decode(&params, &cfg, &z).unwrap();
        assert_eq!(wav.num_samples(), 80_000);
        assert!(wav.samples.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));

        let wrong = AudioLatent { values: Array2::zeros((10, 7)) };
        assert!(matches!(vae_decode(&params, &cfg, &wrong), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shape_roundtrip_property() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 4);
        for t in [1usize, 3, 4, 17, 64] {
            let wav = Waveform::mono(vec![0.3; t], 8000).unwrap();
            let post = vae_encode(&params, &cfg, &wav).unwrap();
            let z = vae_sample(&post, 0);
            let out = vae_decode(&params, &cfg, &z).unwrap();
            assert_eq!(out.num_samples(), t.div_ceil(4) * 4);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_cfg();
        let params = init(&cfg, 5);
        let wav = Waveform::mono((0..40).map(|i| (i as f64 * 0.3).sin() * 0.5).collect(), 8000)
            .unwrap();
        let a = vae_encode(&params, &cfg, &wav).unwrap();
        let b = vae_encode(&params, &cfg, &wav).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.log_variance, b.log_variance);
    }

    #[test]
    fn kl_closed_form_hand_example() {
        // 3-element toy: sum of 0.5*(mu^2 + sigma^2 - 1 - ln sigma^2)
        let mean = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let logvar = Array2::from_shape_vec((1, 3), vec![0.0, 0.5f64.ln(), 2.0f64.ln()]).unwrap();
        let hand = 0.5 * (0.25 + 1.0 - 1.0 - 0.0)
            + 0.5 * (1.0 + 0.5 - 1.0 - 0.5f64.ln())
            + 0.5 * (4.0 + 2.0 - 1.0 - 2.0f64.ln());
        assert!((gaussian_kl_sum(&mean, &logvar) - hand).abs() < 1e-12);
        // standard-normal posterior has zero KL
        let zero = Array2::zeros((2, 2));
        assert_eq!(gaussian_kl_sum(&zero, &Array2::zeros((2, 2))), 0.0);
    }

    #[test]
    fn beta_zero_isolates_reconstruction() {
        let mut cfg = tiny_cfg();
        cfg.beta = 0.0;
        let params = init(&cfg, 6);
        let wav = Waveform::mono(vec![0.2; 32], 8000).unwrap();
        let loss = vae_example_loss(&params, &cfg, &wav, 0, None).unwrap();
        assert_eq!(loss.total, loss.reconstruction);
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut params = init(&cfg, 7);
        let wav = Waveform::mono((0..16).map(|i| (i as f64 * 0.5).sin() * 0.4).collect(), 8000)
            .unwrap();
        let mut grads = Grads::new();
        vae_example_loss(&params, &cfg, &wav, 11, Some(&mut grads)).unwrap();

        let names: Vec<String> = params.names().map(String::from).collect();
        let h = 1e-6;
        for name in names {
            let len = params.get(&name).unwrap().len();
            for flat in (0..len).step_by(3) {
                let orig = params.get(&name).unwrap().as_slice().unwrap()[flat];
                params.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = orig + h;
                let up = vae_example_loss(&params, &cfg, &wav, 11, None).unwrap().total;
                params.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = orig - h;
                let down = vae_example_loss(&params, &cfg, &wav, 11, None).unwrap().total;
                params.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(&name).unwrap().as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{flat}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let cfg = tiny_cfg();
        let mut params = init(&cfg, 8);
        let mut opt = AdamW::new(crate::nn::optim::OptimConfig {
            lr: 3e-3,
            warmup_steps: 10,
            ..Default::default()
        });
        let wav = Waveform::mono(
            (0..64).map(|i| (i as f64 * 2.0 * std::f64::consts::PI / 16.0).sin() * 0.5).collect(),
            8000,
        )
        .unwrap();
        let mut rng = RngStream::new(0, "vae-train");
        let first = vae_train_step(&mut params, &cfg, &mut opt, &[&wav], &mut rng).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = vae_train_step(&mut params, &cfg, &mut opt, &[&wav], &mut rng).unwrap();
        }
        assert!(
            last.reconstruction < 0.5 * first.reconstruction,
            "first {} last {}",
            first.reconstruction,
            last.reconstruction
        );
    }
}
