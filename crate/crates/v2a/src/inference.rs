//! End-to-end generation: one denoising pass over the whole latent sequence
//! (the long-form path), and the split-generate-concatenate adapter used to
//! emulate fixed-length baselines, with inference-count accounting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionMatrix;
use crate::config::RunConfig;
use crate::dit::{self, DiTConfig};
use crate::error::{Error, Result};
use crate::nn::{Params, RngStream};
use crate::sampler::{sample, NoisePredictor, SamplerConfig};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::training::Checkpoint;
use crate::vae::{vae_decode, AudioLatent, VaeConfig};
use crate::wav::Waveform;

/// Everything needed to run inference, assembled from a checkpoint.
/// Parameters are the EMA weights.
pub struct ModelBundle {
    pub config: RunConfig,
    pub vae: VaeConfig,
    pub dit: DiTConfig,
    pub schedule: NoiseSchedule,
    pub params: Params,
    pub latent_scale: f64,
}

impl ModelBundle {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse_text(&ckpt.config_text)?;
        let schedule = make_schedule(config.schedule_kind, config.schedule_steps)?;
        Ok(Self {
            vae: config.vae_config(),
            dit: config.dit_config(),
            schedule,
            params: ckpt.eval_params()?,
            latent_scale: ckpt.latent_scale,
            config,
        })
    }
}

/// DiT wrapped as an epsilon predictor over a fixed context.
pub struct DitPredictor<'a> {
    pub params: &'a Params,
    pub cfg: &'a DiTConfig,
    pub ctx: Array2<f64>,
}

impl NoisePredictor for DitPredictor<'_> {
    fn predict(&self, z_t: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        dit::denoise_with_context(self.params, self.cfg, z_t, &self.ctx, t)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub duration_seconds: f64,
    pub sampler: SamplerConfig,
}

/// Fixed-length tiling of a duration for split-mode generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub split_duration: f64,
    /// [start, end) in seconds, tiling the duration without gaps.
    pub segments: Vec<(f64, f64)>,
    pub num_inferences: usize,
}

pub fn plan_split(duration_seconds: f64, split_duration: f64) -> Result<SplitPlan> {
    if split_duration <= 0.0 || duration_seconds <= 0.0 {
        return Err(Error::InvalidArgument("durations must be positive".into()));
    }
    let mut segments = Vec::new();
    let mut start = 0.0;
    while start + split_duration < duration_seconds - 1e-9 {
        segments.push((start, start + split_duration));
        start += split_duration;
    }
    segments.push((start, duration_seconds));
    Ok(SplitPlan {
        split_duration,
        num_inferences: segments.len(),
        segments,
    })
}

/// Mean inferences per video: ceil(d / split) in split mode, 1.0 in full mode.
pub fn count_inferences(durations: &[f64], split_duration: Option<f64>) -> Result<f64> {
    if durations.is_empty() {
        return Err(Error::InvalidArgument("need at least one duration".into()));
    }
    match split_duration {
        None => Ok(1.0),
        Some(s) => {
            if s <= 0.0 {
                return Err(Error::InvalidArgument("split duration must be positive".into()));
            }
            let total: f64 = durations.iter().map(|d| (d / s).ceil()).sum();
            Ok(total / durations.len() as f64)
        }
    }
}

/// Structured sidecar describing exactly how a waveform was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: String,
    pub config_hash: String,
    pub seed: u64,
    pub duration_seconds: f64,
    pub num_inferences: usize,
    pub sampler_kind: String,
    pub sampler_steps: usize,
    pub guidance_scale: f64,
    pub latent_tokens: usize,
    pub condition_rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_plan: Option<SplitPlan>,
}

#[derive(Debug)]
pub struct GenerationOutput {
    pub waveform: Waveform,
    pub provenance: Provenance,
}

fn condition_rows_for(
    bundle: &ModelBundle,
    features: &Array2<f64>,
    start_seconds: f64,
    end_seconds: f64,
) -> Result<ConditionMatrix> {
    let fps = bundle.config.fps as f64;
    let lo = (start_seconds * fps).round() as usize;
    let hi = (end_seconds * fps).round() as usize;
    if hi > features.nrows() {
        return Err(Error::InvalidArgument(format!(
            "feature track has {} rows but the request needs rows up to {hi} \
             ({} fps over {start_seconds}..{end_seconds} s)",
            features.nrows(),
            bundle.config.fps
        )));
    }
    if hi <= lo {
        return Err(Error::InvalidArgument("empty condition window".into()));
    }
    ConditionMatrix::new(features.slice(ndarray::s![lo..hi, ..]).to_owned())
}

/// One guided sampler pass over `latent_len` tokens, decoded and trimmed to
/// `num_samples`.
fn sample_segment(
    bundle: &ModelBundle,
    cond: &ConditionMatrix,
    latent_len: usize,
    num_samples: usize,
    sampler: &SamplerConfig,
) -> Result<Waveform> {
    if latent_len > bundle.dit.max_tokens {
        return Err(Error::SequenceTooLong { len: latent_len, max: bundle.dit.max_tokens });
    }
    let (ctx_cond, _) = dit::build_context(&bundle.params, &bundle.dit, Some(cond), 0)?;
    let (ctx_uncond, _) = dit::build_context(&bundle.params, &bundle.dit, None, 1)?;
    let cond_pred = DitPredictor { params: &bundle.params, cfg: &bundle.dit, ctx: ctx_cond };
    let uncond_pred = DitPredictor { params: &bundle.params, cfg: &bundle.dit, ctx: ctx_uncond };

    let latent = sample(
        &cond_pred,
        &uncond_pred,
        latent_len,
        bundle.dit.token_dim,
        &bundle.schedule,
        sampler,
    )?;
    let unscaled = AudioLatent { values: latent / bundle.latent_scale };
    let mut wav = vae_decode(&bundle.params, &bundle.vae, &unscaled)?;
    wav.rate = bundle.config.rate;
    Ok(wav.trimmed(num_samples))
}

/// Long-form path: a single denoising pass over the full latent length.
pub fn generate_full(
    bundle: &ModelBundle,
    features: &Array2<f64>,
    req: &GenerationRequest,
) -> Result<GenerationOutput> {
    let duration = req.duration_seconds;
    if duration <= 0.0 {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let latent_len = bundle.config.latent_len_for(duration);
    if latent_len > bundle.dit.max_tokens {
        return Err(Error::SequenceTooLong { len: latent_len, max: bundle.dit.max_tokens })
            .map_err(|e| {
                Error::InvalidArgument(format!("{e}; use --mode split for longer outputs"))
            });
    }
    let cond = condition_rows_for(bundle, features, 0.0, duration)?;
    let num_samples = (duration * bundle.config.rate as f64).round() as usize;
    let waveform = sample_segment(bundle, &cond, latent_len, num_samples, &req.sampler)?;
    Ok(GenerationOutput {
        waveform,
        provenance: Provenance {
            mode: "full".into(),
            config_hash: bundle.config.hash(),
            seed: req.sampler.seed,
            duration_seconds: duration,
            num_inferences: 1,
            sampler_kind: req.sampler.kind.name().into(),
            sampler_steps: req.sampler.steps,
            guidance_scale: req.sampler.guidance_scale,
            latent_tokens: latent_len,
            condition_rows: cond.rows(),
            split_plan: None,
        },
    })
}

/// Baseline adapter: tile the duration, generate each segment independently
/// with fresh noise and positions re-indexed from zero, then concatenate
/// sample-exactly. With `pad_remainder` the final short segment is generated
/// at the full split duration and trimmed (fixed-length-baseline emulation);
/// otherwise it is generated at its true length.
pub fn generate_split_concat(
    bundle: &ModelBundle,
    features: &Array2<f64>,
    req: &GenerationRequest,
    split_duration: f64,
    pad_remainder: bool,
) -> Result<GenerationOutput> {
    let duration = req.duration_seconds;
    let plan = plan_split(duration, split_duration)?;
    let rate = bundle.config.rate as f64;

    let mut joined: Option<Waveform> = None;
    let mut total_cond_rows = 0;
    for (i, &(start, end)) in plan.segments.iter().enumerate() {
        let gen_end = if pad_remainder { start + split_duration } else { end };
        let cond = if pad_remainder && gen_end > duration {
            // emulated fixed-length models see the tail features they have
            condition_rows_for(bundle, features, start, duration)?
        } else {
            condition_rows_for(bundle, features, start, gen_end)?
        };
        total_cond_rows += cond.rows();
        let latent_len = bundle.config.latent_len_for(gen_end - start);
        // boundaries must land exactly on the sample grid
        let seg_samples =
            (end * rate).round() as usize - (start * rate).round() as usize;
        let mut seg_sampler = req.sampler.clone();
        seg_sampler.seed = RngStream::new(req.sampler.seed, &format!("split/{i}")).next_u64();
        let seg =
            sample_segment(bundle, &cond, latent_len, seg_samples, &seg_sampler)?;
        joined = Some(match joined {
            None => seg,
            Some(acc) => acc.concat(&seg)?,
        });
    }

    Ok(GenerationOutput {
        waveform: joined.expect("plan has at least one segment"),
        provenance: Provenance {
            mode: "split".into(),
            config_hash: bundle.config.hash(),
            seed: req.sampler.seed,
            duration_seconds: duration,
            num_inferences: plan.num_inferences,
            sampler_kind: req.sampler.kind.name().into(),
            sampler_steps: req.sampler.steps,
            guidance_scale: req.sampler.guidance_scale,
            latent_tokens: bundle.config.latent_len_for(duration),
            condition_rows: total_cond_rows,
            split_plan: Some(plan),
        },
    })
}

/// Boundary sample indices of a split plan (where segments meet).
pub fn split_boundaries(plan: &SplitPlan, rate: u32) -> Vec<usize> {
    plan.segments
        .iter()
        .skip(1)
        .map(|&(start, _)| (start * rate as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::RngStream;
    use crate::sampler::SamplerKind;
    use crate::synth::{generate_example, DurationPolicy, SyntheticSpec};
    use crate::training::TrainPhase;

    /// Tiny untrained bundle; the sampling path works with a zero-init head.
    fn tiny_bundle() -> ModelBundle {
        let mut cfg = RunConfig::default();
        cfg.set("vae.latent_dim", "4").unwrap();
        cfg.set("vae.strides", "4,4,4,5").unwrap();
        cfg.set("vae.widths", "3,4,6").unwrap();
        cfg.set("model.depth", "1").unwrap();
        cfg.set("model.heads", "2").unwrap();
        cfg.set("model.mlp_ratio", "1").unwrap();
        cfg.set("sampler.steps", "4").unwrap();
        cfg.validate().unwrap();

        let mut params = Params::new();
        let mut rng = RngStream::new(0, "bundle-init");
        crate::vae::vae_init(&mut params, &cfg.vae_config(), &mut rng);
        dit::dit_init(&mut params, &cfg.dit_config(), &mut rng);
        let ckpt = Checkpoint::fresh(
            params,
            cfg.optim_config(cfg.lr_pretrain),
            cfg.ema_decay,
            0,
            TrainPhase::Pretrain,
            1.0,
            cfg.canonical_text(),
        );
        ModelBundle::from_checkpoint(&ckpt).unwrap()
    }

    fn features_for(bundle: &ModelBundle, seconds: f64) -> Array2<f64> {
        let spec = SyntheticSpec {
            num_classes: bundle.config.num_classes,
            durations: DurationPolicy::Fixed(seconds),
            rate: bundle.config.rate,
            fps: bundle.config.fps,
            seed: 1,
        };
        generate_example(&spec, "t", 2, seconds, 99).unwrap().features
    }

    #[test]
    fn split_plan_arithmetic() {
        let p = plan_split(30.0, 10.0).unwrap();
        assert_eq!(p.segments.len(), 3);
        assert_eq!(p.num_inferences, 3);

        let p = plan_split(42.0, 10.0).unwrap();
        assert_eq!(p.segments.len(), 5);
        let last = p.segments.last().unwrap();
        assert!((last.0 - 40.0).abs() < 1e-9 && (last.1 - 42.0).abs() < 1e-9);

        let p = plan_split(10.0, 10.0).unwrap();
        assert_eq!(p.segments, vec![(0.0, 10.0)]);
    }

    #[test]
    fn inference_counting() {
        assert_eq!(count_inferences(&[42.0, 17.0, 60.0], None).unwrap(), 1.0);
        assert_eq!(count_inferences(&[42.0, 42.0, 42.0], Some(10.0)).unwrap(), 5.0);
        assert!(count_inferences(&[], None).is_err());
    }

    #[test]
    fn full_generation_contract_30s() {
        let bundle = tiny_bundle();
        let features = features_for(&bundle, 30.0);
        assert_eq!(features.nrows(), 240); // 30 s at 8 fps
        let req = GenerationRequest {
            duration_seconds: 30.0,
            sampler: SamplerConfig {
                kind: SamplerKind::DpmppThreeMSde,
                steps: 3,
                guidance_scale: 1.0,
                seed: 5,
            },
        };
        let out = generate_full(&bundle, &features, &req).unwrap();
        assert_eq!(out.provenance.latent_tokens, 750); // 30 s * 8000 / 320
        assert_eq!(out.waveform.num_samples(), 240_000);
        assert_eq!(out.provenance.num_inferences, 1);
        assert_eq!(out.provenance.mode, "full");
        assert!(out.waveform.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn split_generation_boundaries_are_exact() {
        let bundle = tiny_bundle();
        let features = features_for(&bundle, 25.0);
        let req = GenerationRequest {
            duration_seconds: 25.0,
            sampler: SamplerConfig {
                kind: SamplerKind::DpmppThreeMSde,
                steps: 3,
                guidance_scale: 1.0,
                seed: 6,
            },
        };
        let out = generate_split_concat(&bundle, &features, &req, 10.0, false).unwrap();
        assert_eq!(out.provenance.num_inferences, 3);
        assert_eq!(out.waveform.num_samples(), 200_000);
        let plan = out.provenance.split_plan.as_ref().unwrap();
        assert_eq!(split_boundaries(plan, 8000), vec![80_000, 160_000]);
        // remainder segment is 5 s
        assert!((plan.segments[2].1 - plan.segments[2].0 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn padded_remainder_mode_trims_to_true_length() {
        let bundle = tiny_bundle();
        let features = features_for(&bundle, 12.0);
        let req = GenerationRequest {
            duration_seconds: 12.0,
            sampler: SamplerConfig {
                kind: SamplerKind::DpmppThreeMSde,
                steps: 2,
                guidance_scale: 1.0,
                seed: 7,
            },
        };
        let out = generate_split_concat(&bundle, &features, &req, 10.0, true).unwrap();
        assert_eq!(out.waveform.num_samples(), 96_000);
        assert_eq!(out.provenance.num_inferences, 2);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let bundle = tiny_bundle();
        let features = features_for(&bundle, 10.0);
        let req = GenerationRequest {
            duration_seconds: 10.0,
            sampler: SamplerConfig {
                kind: SamplerKind::DpmppThreeMSde,
                steps: 3,
                guidance_scale: 2.0,
                seed: 11,
            },
        };
        let a = generate_full(&bundle, &features, &req).unwrap();
        let b = generate_full(&bundle, &features, &req).unwrap();
        assert_eq!(a.waveform.samples, b.waveform.samples);

        let mut req2 = req.clone();
        req2.sampler.seed = 12;
        let c = generate_full(&bundle, &features, &req2).unwrap();
        assert_ne!(a.waveform.samples, c.waveform.samples);
    }

    #[test]
    fn over_length_full_generation_suggests_split_mode() {
        let bundle = tiny_bundle();
        let features = features_for(&bundle, 30.0);
        let req = GenerationRequest {
            duration_seconds: 100.0, // beyond max_seconds=60 capacity
            sampler: SamplerConfig::default(),
        };
        let err = generate_full(&bundle, &features, &req).unwrap_err();
        assert!(err.to_string().contains("split"), "{err}");
    }

    #[test]
    fn provenance_serializes_to_json() {
        let p = Provenance {
            mode: "full".into(),
            config_hash: "abc".into(),
            seed: 1,
            duration_seconds: 30.0,
            num_inferences: 1,
            sampler_kind: "dpmpp_3m_sde".into(),
            sampler_steps: 150,
            guidance_scale: 5.0,
            latent_tokens: 750,
            condition_rows: 240,
            split_plan: None,
        };
        let json = serde_json::to_string_pretty(&p).unwrap();
        assert!(json.contains("\"num_inferences\": 1"));
        assert!(!json.contains("split_plan"));
    }
}
