//! Flat-namespaced key=value run configuration. Unknown keys are rejected,
//! and every run's outputs embed the canonical content hash.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dit::DiTConfig;
use crate::error::{Error, Result};
use crate::nn::optim::OptimConfig;
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::ScheduleKind;
use crate::vae::VaeConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub rate: u32,
    pub fps: u32,
    pub channels: usize,
    pub vae_latent_dim: usize,
    pub vae_strides: Vec<usize>,
    pub vae_widths: Vec<usize>,
    pub vae_beta: f64,
    pub vae_lr: f64,
    pub vae_epochs: usize,
    pub vae_batch: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub max_seconds: f64,
    pub schedule_kind: ScheduleKind,
    pub schedule_steps: usize,
    pub sampler_kind: SamplerKind,
    pub sampler_steps: usize,
    pub guidance: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub train_batch: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub eval_window: f64,
    pub eval_hop: f64,
    pub embed_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 8,
            rate: 8000,
            fps: 8,
            channels: 1,
            vae_latent_dim: 32,
            vae_strides: vec![4, 4, 4, 5],
            vae_widths: vec![16, 32, 64],
            vae_beta: 1e-4,
            vae_lr: 1e-3,
            vae_epochs: 30,
            vae_batch: 8,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            max_seconds: 60.0,
            schedule_kind: ScheduleKind::Cosine,
            schedule_steps: 1000,
            sampler_kind: SamplerKind::DpmppThreeMSde,
            sampler_steps: 150,
            guidance: 5.0,
            lr_pretrain: 1e-4,
            lr_finetune: 3e-5,
            warmup: 500,
            weight_decay: 0.01,
            clip_norm: 1.0,
            ema_decay: 0.999,
            train_batch: 8,
            epochs_pretrain: 40,
            epochs_finetune: 15,
            eval_window: 10.0,
            eval_hop: 5.0,
            embed_dim: 16,
        }
    }
}

fn join_usizes(v: &[usize]) -> String {
    v.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usizes(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
        })
        .collect()
}

impl RunConfig {
    /// All keys in canonical order with canonical value spellings.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("data.num_classes", self.num_classes.to_string());
        put("data.rate", self.rate.to_string());
        put("data.fps", self.fps.to_string());
        put("data.channels", self.channels.to_string());
        put("vae.latent_dim", self.vae_latent_dim.to_string());
        put("vae.strides", join_usizes(&self.vae_strides));
        put("vae.widths", join_usizes(&self.vae_widths));
        put("vae.beta", self.vae_beta.to_string());
        put("vae.lr", self.vae_lr.to_string());
        put("vae.epochs", self.vae_epochs.to_string());
        put("vae.batch", self.vae_batch.to_string());
        put("model.depth", self.depth.to_string());
        put("model.heads", self.heads.to_string());
        put("model.mlp_ratio", self.mlp_ratio.to_string());
        put("model.max_seconds", self.max_seconds.to_string());
        put("schedule.kind", match self.schedule_kind {
            ScheduleKind::Cosine => "cosine".into(),
            ScheduleKind::Linear => "linear".into(),
        });
        put("schedule.steps", self.schedule_steps.to_string());
        put("sampler.kind", self.sampler_kind.name().to_string());
        put("sampler.steps", self.sampler_steps.to_string());
        put("sampler.guidance", self.guidance.to_string());
        put("train.lr_pretrain", self.lr_pretrain.to_string());
        put("train.lr_finetune", self.lr_finetune.to_string());
        put("train.warmup", self.warmup.to_string());
        put("train.weight_decay", self.weight_decay.to_string());
        put("train.clip", self.clip_norm.to_string());
        put("train.ema", self.ema_decay.to_string());
        put("train.batch", self.train_batch.to_string());
        put("train.epochs_pretrain", self.epochs_pretrain.to_string());
        put("train.epochs_finetune", self.epochs_finetune.to_string());
        put("eval.window", self.eval_window.to_string());
        put("eval.hop", self.eval_hop.to_string());
        put("eval.embed_dim", self.embed_dim.to_string());
        m
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
        }
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "data.num_classes" => self.num_classes = num(key, v)?,
            "data.rate" => self.rate = num(key, v)?,
            "data.fps" => self.fps = num(key, v)?,
            "data.channels" => self.channels = num(key, v)?,
            "vae.latent_dim" => self.vae_latent_dim = num(key, v)?,
            "vae.strides" => self.vae_strides = parse_usizes(key, v)?,
            "vae.widths" => self.vae_widths = parse_usizes(key, v)?,
            "vae.beta" => self.vae_beta = num(key, v)?,
            "vae.lr" => self.vae_lr = num(key, v)?,
            "vae.epochs" => self.vae_epochs = num(key, v)?,
            "vae.batch" => self.vae_batch = num(key, v)?,
            "model.depth" => self.depth = num(key, v)?,
            "model.heads" => self.heads = num(key, v)?,
            "model.mlp_ratio" => self.mlp_ratio = num(key, v)?,
            "model.max_seconds" => self.max_seconds = num(key, v)?,
            "schedule.kind" => self.schedule_kind = v.parse()?,
            "schedule.steps" => self.schedule_steps = num(key, v)?,
            "sampler.kind" => self.sampler_kind = v.parse()?,
            "sampler.steps" => self.sampler_steps = num(key, v)?,
            "sampler.guidance" => self.guidance = num(key, v)?,
            "train.lr_pretrain" => self.lr_pretrain = num(key, v)?,
            "train.lr_finetune" => self.lr_finetune = num(key, v)?,
            "train.warmup" => self.warmup = num(key, v)?,
            "train.weight_decay" => self.weight_decay = num(key, v)?,
            "train.clip" => self.clip_norm = num(key, v)?,
            "train.ema" => self.ema_decay = num(key, v)?,
            "train.batch" => self.train_batch = num(key, v)?,
            "train.epochs_pretrain" => self.epochs_pretrain = num(key, v)?,
            "train.epochs_finetune" => self.epochs_finetune = num(key, v)?,
            "eval.window" => self.eval_window = num(key, v)?,
            "eval.hop" => self.eval_hop = num(key, v)?,
            "eval.embed_dim" => self.embed_dim = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical serialization: sorted key=value lines.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.vae_config().validate()?;
        self.dit_config().validate()?;
        if self.rate == 0 || self.fps == 0 {
            return Err(Error::Config("data.rate and data.fps must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be >= 2".into()));
        }
        if self.schedule_steps < 2 {
            return Err(Error::Config("schedule.steps must be >= 2".into()));
        }
        if self.sampler_steps == 0 || self.guidance < 0.0 {
            return Err(Error::Config("bad sampler settings".into()));
        }
        if self.eval_window <= 0.0 || self.eval_hop <= 0.0 {
            return Err(Error::Config("eval window and hop must be positive".into()));
        }
        if self.max_seconds <= 0.0 {
            return Err(Error::Config("model.max_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            channels: self.channels,
            latent_dim: self.vae_latent_dim,
            strides: self.vae_strides.clone(),
            widths: self.vae_widths.clone(),
            beta: self.vae_beta,
        }
    }

    /// Samples per latent step.
    pub fn compression_ratio(&self) -> usize {
        self.vae_strides.iter().product()
    }

    /// Token width after folding channels into features.
    pub fn token_dim(&self) -> usize {
        self.channels * self.vae_latent_dim
    }

    /// Condition width for the synthetic oracle features.
    pub fn cond_dim(&self) -> usize {
        self.num_classes + 3
    }

    pub fn max_tokens(&self) -> usize {
        ((self.max_seconds * self.rate as f64).ceil() as usize)
            .div_ceil(self.compression_ratio())
    }

    pub fn max_cond_len(&self) -> usize {
        (self.max_seconds * self.fps as f64).round() as usize
    }

    pub fn dit_config(&self) -> DiTConfig {
        DiTConfig {
            depth: self.depth,
            heads: self.heads,
            token_dim: self.token_dim(),
            cond_dim: self.cond_dim(),
            mlp_ratio: self.mlp_ratio,
            max_tokens: self.max_tokens(),
            max_cond_len: self.max_cond_len(),
        }
    }

    pub fn optim_config(&self, phase_lr: f64) -> OptimConfig {
        OptimConfig {
            lr: phase_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup,
            clip_norm: self.clip_norm,
        }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler_kind,
            steps: self.sampler_steps,
            guidance_scale: self.guidance,
            seed,
        }
    }

    pub fn latent_len_for(&self, duration_seconds: f64) -> usize {
        ((duration_seconds * self.rate as f64).round() as usize)
            .div_ceil(self.compression_ratio())
    }

    pub fn frames_for(&self, duration_seconds: f64) -> usize {
        crate::conditioning::frame_count(duration_seconds, self.fps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_text();
        let back = RunConfig::parse_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_text("model.depht=4\n").unwrap_err();
        assert!(err.to_string().contains("model.depht"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_text("# a comment\n\nmodel.depth=2\n").unwrap();
        assert_eq!(cfg.depth, 2);
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.set("sampler.guidance", "3.5").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn derived_dimensions() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.compression_ratio(), 320);
        assert_eq!(cfg.token_dim(), 32);
        assert_eq!(cfg.cond_dim(), 11);
        // 60 s at 8 kHz / 320 and 60 s at 8 fps
        assert_eq!(cfg.max_tokens(), 1500);
        assert_eq!(cfg.max_cond_len(), 480);
        // 30 s clip arithmetic
        assert_eq!(cfg.latent_len_for(30.0), 750);
        assert_eq!(cfg.frames_for(30.0), 240);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse_text("model.depth=banana\n").unwrap_err();
        assert!(err.to_string().contains("model.depth"), "{err}");
        assert!(RunConfig::parse_text("model.depth=0\n").is_err());
    }
}
