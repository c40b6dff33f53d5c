//! Command-line entry points wiring the modules into reproducible runs.
//!
//! Every subcommand resolves a [`RunConfig`] from defaults, an optional
//! config file, repeated `--set key=value` overrides and `--seed`; primary
//! outputs embed the config hash and are byte-identical across reruns.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::conditioning::{read_features, ConditionMatrix};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate_directories;
use crate::inference::{
    count_inferences, generate_full, generate_split_concat, GenerationOutput, GenerationRequest,
    ModelBundle,
};
use crate::nn::{Params, RngStream};
use crate::synth::{make_corpus, CorpusManifest, DurationPolicy, SyntheticSpec};
use crate::training::{
    run_phase, Checkpoint, CurvePoint, PhaseOptions, TrainItem, TrainPhase,
};
use crate::vae::{latent_scale, vae_encode, vae_init, vae_train_step};
use crate::wav::{read_wav, write_wav, SampleFormat};

#[derive(Parser)]
#[command(
    name = "v2a",
    about = "Long-form video-to-audio generation with a latent diffusion transformer",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file with key=value lines (see `RunConfig` keys)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set model.depth=2 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply_overrides(&mut cfg)?;
        Ok(cfg)
    }

    fn apply_overrides(&self, cfg: &mut RunConfig) -> Result<()> {
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()
    }

    /// Continue from a checkpoint's embedded config, warn when a provided
    /// config file disagrees, then apply flag overrides.
    fn resolve_from_checkpoint(&self, ckpt: &Checkpoint) -> Result<RunConfig> {
        let mut cfg = RunConfig::parse_text(&ckpt.config_text)?;
        if let Some(path) = &self.config {
            let given = RunConfig::load(path)?;
            if given.hash() != cfg.hash() {
                eprintln!(
                    "warning: config {} (hash {}) differs from the checkpoint's config \
                     (hash {}); the checkpoint's config governs the model",
                    path.display(),
                    &given.hash()[..12],
                    &cfg.hash()[..12]
                );
            }
        }
        self.apply_overrides(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus (WAVs, feature files, manifest)
    MakeData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of examples
        #[arg(long)]
        count: usize,
        /// Duration preset: pretrain (fixed 10 s) or finetune (uniform 10-60 s)
        #[arg(long, default_value = "pretrain", value_parser = ["pretrain", "finetune"])]
        split: String,
        /// Explicit duration policy, overriding --split: fixed:S or uniform:LO,HI
        #[arg(long)]
        durations: Option<String>,
    },
    /// Train the audio VAE on a corpus and write a checkpoint
    TrainVae {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory (from make-data)
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
    },
    /// Short-form pretraining of the denoiser on fixed-length pairs
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory
        #[arg(long)]
        data: PathBuf,
        /// VAE checkpoint (from train-vae)
        #[arg(long)]
        vae: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Resume a partially trained pretrain checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of epochs from the config
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Long-form finetuning of the position tables and the final block
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory (variable-length split)
        #[arg(long)]
        data: PathBuf,
        /// Pretrain checkpoint to start from
        #[arg(long = "from-checkpoint")]
        from_checkpoint: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Override the number of epochs from the config
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate audio from a cached feature track
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cached-feature file conditioning the generation
        #[arg(long)]
        features: PathBuf,
        /// full: one denoising pass; split: tile, generate, concatenate
        #[arg(long, default_value = "full", value_parser = ["full", "split"])]
        mode: String,
        /// Segment length in seconds for split mode
        #[arg(long, default_value_t = 10.0)]
        split_duration: f64,
        /// Output duration in seconds (default: the feature track's length)
        #[arg(long)]
        duration: Option<f64>,
        /// Generate the final short remainder at the full split duration and
        /// trim, emulating fixed-length baselines
        #[arg(long, default_value_t = false)]
        pad_remainder: bool,
        /// Output WAV path; a .wav.json provenance sidecar is written next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the windowed long-form metrics for generated vs reference audio
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of generated WAVs named <id>.wav
        #[arg(long)]
        generated: PathBuf,
        /// Reference corpus directory (with manifest.csv)
        #[arg(long)]
        reference: PathBuf,
        /// Report output path (key-value text)
        #[arg(long)]
        out: PathBuf,
        /// Per-audio CSV path (default: <out>.per_audio.csv)
        #[arg(long)]
        per_audio: Option<PathBuf>,
    },
    /// Sweep split durations: generate + evaluate per setting, emit a CSV table
    CompareSplits {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation corpus directory (conditions and references)
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated split durations in seconds, or "full"
        #[arg(long, default_value = "10,20,30,full")]
        splits: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Working directory for generated audio (default: <out>.work)
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with exit 0, errors at 2
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData { config, out, count, split, durations } => {
            cmd_make_data(&config, &out, count, &split, durations.as_deref())
        }
        Command::TrainVae { config, data, out } => cmd_train_vae(&config, &data, &out),
        Command::Pretrain { config, data, vae, out, resume, epochs } => {
            cmd_pretrain(&config, &data, &vae, &out, resume.as_deref(), epochs)
        }
        Command::Finetune { config, data, from_checkpoint, out, epochs } => {
            cmd_finetune(&config, &data, &from_checkpoint, &out, epochs)
        }
        Command::Generate {
            config,
            checkpoint,
            features,
            mode,
            split_duration,
            duration,
            pad_remainder,
            out,
        } => cmd_generate(
            &config,
            &checkpoint,
            &features,
            &mode,
            split_duration,
            duration,
            pad_remainder,
            &out,
        ),
        Command::Evaluate { config, generated, reference, out, per_audio } => {
            cmd_evaluate(&config, &generated, &reference, &out, per_audio.as_deref())
        }
        Command::CompareSplits { config, checkpoint, data, splits, out, workdir } => {
            cmd_compare_splits(&config, &checkpoint, &data, &splits, &out, workdir.as_deref())
        }
    }
}

fn parse_duration_policy(s: &str) -> Result<DurationPolicy> {
    if let Some(v) = s.strip_prefix("fixed:") {
        let d: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad fixed duration {v:?}")))?;
        return Ok(DurationPolicy::Fixed(d));
    }
    if let Some(v) = s.strip_prefix("uniform:") {
        let (lo, hi) = v
            .split_once(',')
            .ok_or_else(|| Error::Config("uniform durations need LO,HI".into()))?;
        let lo: f64 = lo.parse().map_err(|_| Error::Config(format!("bad duration {lo:?}")))?;
        let hi: f64 = hi.parse().map_err(|_| Error::Config(format!("bad duration {hi:?}")))?;
        return Ok(DurationPolicy::Uniform(lo, hi));
    }
    Err(Error::Config(format!(
        "duration policy must be fixed:S or uniform:LO,HI, got {s:?}"
    )))
}

fn cmd_make_data(
    config: &ConfigArgs,
    out: &Path,
    count: usize,
    split: &str,
    durations: Option<&str>,
) -> Result<()> {
    let cfg = config.resolve()?;
    let policy = match durations {
        Some(s) => parse_duration_policy(s)?,
        None => match split {
            "finetune" => DurationPolicy::Uniform(10.0, 60.0),
            _ => DurationPolicy::Fixed(10.0),
        },
    };
    let spec = SyntheticSpec {
        num_classes: cfg.num_classes,
        durations: policy,
        rate: cfg.rate,
        fps: cfg.fps,
        seed: cfg.seed,
    };
    let manifest = make_corpus(&spec, count, out)?;
    let total: f64 = manifest.entries.iter().map(|e| e.duration_seconds).sum();
    println!(
        "wrote {} examples ({:.1} s of audio) to {} [config {}]",
        manifest.entries.len(),
        total,
        out.display(),
        &cfg.hash()[..12]
    );
    Ok(())
}

fn load_corpus_waveforms(data: &Path) -> Result<(CorpusManifest, Vec<crate::wav::Waveform>)> {
    let manifest = CorpusManifest::load(&data.join("manifest.csv"))?;
    let mut wavs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        wavs.push(read_wav(&data.join(&e.wav_path))?);
    }
    Ok((manifest, wavs))
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("step,phase,loss,lr\n");
    for c in curve {
        text.push_str(&format!("{},{},{},{}\n", c.step, c.phase, c.loss, c.lr));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn curve_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".curve.csv");
    out.with_file_name(name)
}

fn cmd_train_vae(config: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let vae_cfg = cfg.vae_config();
    let (_, wavs) = load_corpus_waveforms(data)?;

    let mut params = Params::new();
    let mut init_rng = RngStream::new(cfg.seed, "vae-init");
    vae_init(&mut params, &vae_cfg, &mut init_rng);
    let mut opt = crate::nn::optim::AdamW::new(crate::nn::optim::OptimConfig {
        lr: cfg.vae_lr,
        warmup_steps: 100,
        ..cfg.optim_config(cfg.vae_lr)
    });
    let mut rng = RngStream::new(cfg.seed, "vae-train");
    let mut order_rng = RngStream::new(cfg.seed, "vae-order");

    let mut curve = Vec::new();
    let mut step = 0u64;
    for _epoch in 0..cfg.vae_epochs {
        let order = order_rng.shuffled_indices(wavs.len());
        for chunk in order.chunks(cfg.vae_batch.max(1)) {
            let batch: Vec<&crate::wav::Waveform> = chunk.iter().map(|&i| &wavs[i]).collect();
            let lr = opt.effective_lr(opt.step);
            let loss = vae_train_step(&mut params, &vae_cfg, &mut opt, &batch, &mut rng)?;
            step += 1;
            curve.push(CurvePoint { step, phase: "vae", loss: loss.total, lr });
        }
    }

    let scale = latent_scale(&params, &vae_cfg, &wavs, cfg.seed)?;
    let ckpt = Checkpoint::fresh(
        params,
        cfg.optim_config(cfg.lr_pretrain),
        cfg.ema_decay,
        cfg.seed,
        TrainPhase::Pretrain,
        scale,
        cfg.canonical_text(),
    );
    ckpt.save(out)?;
    write_curve(&curve_path(out), &curve)?;
    let last = curve.last().map(|c| c.loss).unwrap_or(f64::NAN);
    println!(
        "trained vae for {} steps (final loss {:.6}, latent scale {:.4}) -> {}",
        step,
        last,
        scale,
        out.display()
    );
    Ok(())
}

/// Encode the corpus once through the frozen VAE and pair posteriors with
/// raw condition tracks.
fn build_train_items(
    data: &Path,
    params: &Params,
    cfg: &RunConfig,
) -> Result<Vec<TrainItem>> {
    let vae_cfg = cfg.vae_config();
    let manifest = CorpusManifest::load(&data.join("manifest.csv"))?;
    let mut items = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let wav = read_wav(&data.join(&e.wav_path))?;
        let feats = read_features(&data.join(&e.feat_path))?;
        if feats.ncols() != cfg.cond_dim() {
            return Err(Error::Config(format!(
                "feature dim {} in {} does not match config cond dim {}",
                feats.ncols(),
                e.feat_path,
                cfg.cond_dim()
            )));
        }
        items.push(TrainItem {
            posterior: vae_encode(params, &vae_cfg, &wav)?,
            cond: ConditionMatrix::new(feats)?,
        });
    }
    Ok(items)
}

fn cmd_pretrain(
    config: &ConfigArgs,
    data: &Path,
    vae: &Path,
    out: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut state = if let Some(resume_path) = resume {
        let ckpt = Checkpoint::load(resume_path)?;
        let _ = config.resolve_from_checkpoint(&ckpt)?;
        ckpt
    } else {
        let vae_ckpt = Checkpoint::load(vae)?;
        let cfg = config.resolve_from_checkpoint(&vae_ckpt)?;
        let mut params = vae_ckpt.params.clone();
        let mut init_rng = RngStream::new(cfg.seed, "dit-init");
        crate::dit::dit_init(&mut params, &cfg.dit_config(), &mut init_rng);
        Checkpoint::fresh(
            params,
            cfg.optim_config(cfg.lr_pretrain),
            cfg.ema_decay,
            cfg.seed,
            TrainPhase::Pretrain,
            vae_ckpt.latent_scale,
            cfg.canonical_text(),
        )
    };
    let cfg = RunConfig::parse_text(&state.config_text)?;
    let items = build_train_items(data, &state.params, &cfg)?;
    let sched = crate::schedule::make_schedule(cfg.schedule_kind, cfg.schedule_steps)?;
    let mut curve = Vec::new();
    let options = PhaseOptions {
        phase: TrainPhase::Pretrain,
        epochs: epochs.unwrap_or(cfg.epochs_pretrain),
        batch_size: cfg.train_batch,
        checkpoint_every: 0,
    };
    run_phase(&mut state, &cfg.dit_config(), &sched, &items, &options, &mut curve, |s, _| {
        s.save(out)
    })?;
    state.save(out)?;
    write_curve(&curve_path(out), &curve)?;
    let last = curve.last().map(|c| c.loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps on {} pairs (final loss {:.6}) -> {}",
        state.step,
        items.len(),
        last,
        out.display()
    );
    Ok(())
}

fn cmd_finetune(
    config: &ConfigArgs,
    data: &Path,
    from_checkpoint: &Path,
    out: &Path,
    epochs: Option<usize>,
) -> Result<()> {
    let base = Checkpoint::load(from_checkpoint)?;
    if base.step == 0 {
        return Err(Error::Precondition(format!(
            "{} has no pretraining steps; finetune requires a pretrain checkpoint",
            from_checkpoint.display()
        )));
    }
    let cfg = config.resolve_from_checkpoint(&base)?;

    // fresh optimizer and EMA for the new phase, at the finetune rate
    let mut state = Checkpoint::fresh(
        base.params,
        cfg.optim_config(cfg.lr_finetune),
        cfg.ema_decay,
        cfg.seed ^ 0xF17E,
        TrainPhase::Finetune,
        base.latent_scale,
        cfg.canonical_text(),
    );
    state.step = base.step;

    let items = build_train_items(data, &state.params, &cfg)?;
    let sched = crate::schedule::make_schedule(cfg.schedule_kind, cfg.schedule_steps)?;
    let mut curve = Vec::new();
    let options = PhaseOptions {
        phase: TrainPhase::Finetune,
        epochs: epochs.unwrap_or(cfg.epochs_finetune),
        batch_size: cfg.train_batch,
        checkpoint_every: 0,
    };
    run_phase(&mut state, &cfg.dit_config(), &sched, &items, &options, &mut curve, |s, _| {
        s.save(out)
    })?;
    state.save(out)?;
    write_curve(&curve_path(out), &curve)?;
    let last = curve.last().map(|c| c.loss).unwrap_or(f64::NAN);
    println!(
        "finetuned to step {} on {} pairs (final loss {:.6}) -> {}",
        state.step,
        items.len(),
        last,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config: &ConfigArgs,
    checkpoint: &Path,
    features_path: &Path,
    mode: &str,
    split_duration: f64,
    duration: Option<f64>,
    pad_remainder: bool,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = config.resolve_from_checkpoint(&ckpt)?;
    let bundle = bundle_with_config(&ckpt, cfg)?;
    let features = read_features(features_path)?;
    let duration =
        duration.unwrap_or(features.nrows() as f64 / bundle.config.fps as f64);

    let output = generate_with_mode(
        &bundle,
        &features,
        duration,
        mode,
        split_duration,
        pad_remainder,
        bundle.config.seed,
    )?;
    write_generation(out, &output)?;
    println!(
        "wrote {:.1} s ({} samples, {} inference{}) -> {}",
        output.waveform.duration_seconds(),
        output.waveform.num_samples(),
        output.provenance.num_inferences,
        if output.provenance.num_inferences == 1 { "" } else { "s" },
        out.display()
    );
    Ok(())
}

fn bundle_with_config(ckpt: &Checkpoint, cfg: RunConfig) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::from_checkpoint(ckpt)?;
    // sampler/eval overrides are free; model shape must match the weights
    if cfg.dit_config() != bundle.dit || cfg.vae_config() != bundle.vae {
        return Err(Error::Config(
            "config overrides change the model shape; the checkpoint cannot be used".into(),
        ));
    }
    bundle.config = cfg;
    Ok(bundle)
}

pub(crate) fn generate_with_mode(
    bundle: &ModelBundle,
    features: &Array2<f64>,
    duration: f64,
    mode: &str,
    split_duration: f64,
    pad_remainder: bool,
    seed: u64,
) -> Result<GenerationOutput> {
    let req = GenerationRequest {
        duration_seconds: duration,
        sampler: bundle.config.sampler_config(seed),
    };
    match mode {
        "full" => generate_full(bundle, features, &req),
        "split" => generate_split_concat(bundle, features, &req, split_duration, pad_remainder),
        other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
    }
}

pub(crate) fn write_generation(out: &Path, output: &GenerationOutput) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_wav(out, &output.waveform, SampleFormat::Float32)?;
    let sidecar = out.with_extension("wav.json");
    let json = serde_json::to_string_pretty(&output.provenance)
        .map_err(|e| Error::format(&sidecar, e.to_string()))?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

fn cmd_evaluate(
    config: &ConfigArgs,
    generated: &Path,
    reference: &Path,
    out: &Path,
    per_audio: Option<&Path>,
) -> Result<()> {
    let cfg = config.resolve()?;
    let report = evaluate_directories(generated, reference, &cfg)?;
    std::fs::write(out, report.to_text()).map_err(|e| Error::io(out, e))?;
    let csv_path = match per_audio {
        Some(p) => p.to_path_buf(),
        None => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".per_audio.csv");
            out.with_file_name(name)
        }
    };
    std::fs::write(&csv_path, report.per_audio_csv()).map_err(|e| Error::io(&csv_path, e))?;
    println!(
        "evaluated {} audios: fad {:.4}, is {:.4}, mkl {:.4}, discontinuity {:.4} -> {}",
        report.num_audios,
        report.fad,
        report.inception_score,
        report.mkl,
        report.mean_discontinuity,
        out.display()
    );
    Ok(())
}

fn cmd_compare_splits(
    config: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    splits: &str,
    out: &Path,
    workdir: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = config.resolve_from_checkpoint(&ckpt)?;
    let bundle = bundle_with_config(&ckpt, cfg.clone())?;
    let manifest = CorpusManifest::load(&data.join("manifest.csv"))?;

    let work = match workdir {
        Some(p) => p.to_path_buf(),
        None => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".work");
            out.with_file_name(name)
        }
    };

    let mut rows = Vec::new();
    for setting in splits.split(',') {
        let setting = setting.trim();
        let (mode, split_dur, label) = if setting == "full" {
            ("full", 0.0, "full".to_string())
        } else {
            let s: f64 = setting
                .parse()
                .map_err(|_| Error::Config(format!("bad split duration {setting:?}")))?;
            ("split", s, setting.to_string())
        };
        let gen_dir = work.join(format!("split_{label}"));
        std::fs::create_dir_all(&gen_dir).map_err(|e| Error::io(&gen_dir, e))?;

        let mut durations = Vec::new();
        for e in &manifest.entries {
            let feats = read_features(&data.join(&e.feat_path))?;
            let output = generate_with_mode(
                &bundle,
                &feats,
                e.duration_seconds,
                mode,
                split_dur,
                false,
                bundle.config.seed ^ fxhash(&e.id),
            )?;
            write_generation(&gen_dir.join(format!("{}.wav", e.id)), &output)?;
            durations.push(e.duration_seconds);
        }
        let report = evaluate_directories(&gen_dir, data, &cfg)?;
        let num_inf = if mode == "full" {
            count_inferences(&durations, None)?
        } else {
            count_inferences(&durations, Some(split_dur))?
        };
        println!(
            "split={label}: fad {:.4}, mkl {:.4}, discontinuity {:.4}, num_inferences {:.2}",
            report.fad, report.mkl, report.mean_discontinuity, num_inf
        );
        rows.push((label, report, num_inf));
    }

    let mut csv = String::from("split,fad,mkl,discontinuity,num_inferences\n");
    for (label, report, num_inf) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            label, report.fad, report.mkl, report.mean_discontinuity, num_inf
        ));
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    println!("wrote split comparison table -> {}", out.display());
    Ok(())
}

/// Small deterministic string hash for deriving per-example seeds.
fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_policy_parsing() {
        assert_eq!(parse_duration_policy("fixed:30").unwrap(), DurationPolicy::Fixed(30.0));
        assert_eq!(
            parse_duration_policy("uniform:10,60").unwrap(),
            DurationPolicy::Uniform(10.0, 60.0)
        );
        assert!(parse_duration_policy("sometimes:5").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["v2a", "frobnicate"]), 2);
        assert_eq!(run(["v2a", "finetune", "--out", "x.ckpt"]), 2); // missing required args
        assert_eq!(run(["v2a", "--help"]), 0);
    }

    #[test]
    fn config_override_pipeline() {
        let args = ConfigArgs {
            config: None,
            set: vec!["model.depth=2".into(), "sampler.guidance=3".into()],
            seed: Some(9),
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.depth, 2);
        assert_eq!(cfg.guidance, 3.0);
        assert_eq!(cfg.seed, 9);

        let bad = ConfigArgs { config: None, set: vec!["nope=1".into()], seed: None };
        assert!(bad.resolve().is_err());
    }
}
