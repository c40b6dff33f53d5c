//! Two-phase diffusion training: short-form pretraining of the whole
//! denoiser, then long-form finetuning that updates only the position tables
//! and the final block. Includes the checkpoint container and the per-phase
//! freeze logic.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};

use crate::conditioning::ConditionMatrix;
use crate::dit::{self, DiTConfig};
use crate::error::{Error, Result};
use crate::nn::optim::{AdamW, Ema, OptimConfig};
use crate::nn::{Grads, Params, RngStream, Tensor};
use crate::schedule::{denoising_loss, denoising_loss_grad, forward_diffuse, NoiseDraw, NoiseSchedule};
use crate::vae::{is_vae_param, vae_sample, VaePosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Pretrain,
    Finetune,
}

impl TrainPhase {
    pub fn name(&self) -> &'static str {
        match self {
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainPhase::Pretrain),
            "finetune" => Ok(TrainPhase::Finetune),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Names the optimizer may update in a phase.
///
/// Pretraining trains the whole denoiser (blocks, both position tables, the
/// timestep embedding, the null row); the VAE stays frozen. Finetuning trains
/// exactly the two position tables and the final block.
pub fn freeze_mask(
    phase: TrainPhase,
    params: &Params,
    cfg: &DiTConfig,
) -> Result<BTreeSet<String>> {
    for name in params.names() {
        if !(is_vae_param(name) || dit::is_dit_param(name)) {
            return Err(Error::RegistryInconsistency(format!(
                "parameter {name} belongs to no known group"
            )));
        }
    }
    let final_prefix = cfg.final_block_prefix();
    let selected = params
        .names()
        .filter(|n| match phase {
            TrainPhase::Pretrain => dit::is_dit_param(n),
            TrainPhase::Finetune => {
                *n == "dit.pe_z" || *n == "cond.pe_c" || n.starts_with(&final_prefix)
            }
        })
        .map(String::from)
        .collect();
    Ok(selected)
}

/// One training pair: a cached latent posterior plus raw condition rows.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub posterior: VaePosterior,
    pub cond: ConditionMatrix,
}

/// Loss (and optionally gradients) of the denoiser on one noised example.
/// `dropped` selects the unconditional branch: the condition is replaced by
/// the learned null row repeated to the condition length.
pub fn diffusion_loss(
    params: &Params,
    cfg: &DiTConfig,
    sched: &NoiseSchedule,
    z0: &Array2<f64>,
    cond: &ConditionMatrix,
    dropped: bool,
    t: usize,
    eps: &NoiseDraw,
    grads: Option<&mut Grads>,
) -> Result<f64> {
    let z_t = forward_diffuse(z0, t, eps, sched)?;
    let (ctx, route) = if dropped {
        dit::build_context(params, cfg, None, cond.rows())?
    } else {
        dit::build_context(params, cfg, Some(cond), 0)?
    };
    let (eps_hat, cache) = dit::denoise_with_context_cached(params, cfg, &z_t, &ctx, t as f64)?;
    let loss = denoising_loss(&eps_hat, &eps.epsilon)?;
    if let Some(g) = grads {
        let d_eps_hat = denoising_loss_grad(&eps_hat, &eps.epsilon);
        let (_d_z, d_ctx) = dit::dit_bwd(params, cfg, &cache, &d_eps_hat, g);
        dit::context_bwd(cfg, &route, &d_ctx, g);
    }
    Ok(loss)
}

/// The four deterministic streams a training run consumes.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub data: RngStream,
    pub timestep: RngStream,
    pub noise: RngStream,
    pub dropout: RngStream,
}

impl TrainRngs {
    pub fn new(master_seed: u64) -> Self {
        Self {
            data: RngStream::new(master_seed, "train/data"),
            timestep: RngStream::new(master_seed, "train/t"),
            noise: RngStream::new(master_seed, "train/eps"),
            dropout: RngStream::new(master_seed, "train/dropout"),
        }
    }
}

pub const CONDITION_DROPOUT_P: f64 = 0.1;

/// One optimizer step over a batch of items. Samples t uniformly and a fresh
/// noise draw per example, applies condition dropout, and updates only the
/// parameters in `trainable`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut Params,
    cfg: &DiTConfig,
    sched: &NoiseSchedule,
    opt: &mut AdamW,
    ema: &mut Ema,
    trainable: &BTreeSet<String>,
    batch: &[(usize, &Array2<f64>, &ConditionMatrix)],
    rngs: &mut TrainRngs,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut grads = Grads::new();
    let mut total = 0.0;
    for (_, z0, cond) in batch {
        let t = rngs.timestep.uniform_usize(sched.num_steps);
        let eps = NoiseDraw {
            epsilon: rngs.noise.normal_mat(z0.nrows(), z0.ncols()),
            seed: 0,
        };
        let dropped = rngs.dropout.uniform() < CONDITION_DROPOUT_P;
        total += diffusion_loss(params, cfg, sched, z0, cond, dropped, t, &eps, Some(&mut grads))?;
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    let loss = total * scale;
    if !loss.is_finite() {
        let ids: Vec<String> = batch.iter().map(|(i, _, _)| i.to_string()).collect();
        return Err(Error::TrainingDiverged(format!(
            "loss is {loss} at step {} on batch [{}]",
            opt.step,
            ids.join(",")
        )));
    }
    opt.apply(params, &mut grads, trainable)?;
    ema.update(params);
    Ok(loss)
}

/// (step, phase, loss, lr) record for the training curve CSV.
#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub step: u64,
    pub phase: &'static str,
    pub loss: f64,
    pub lr: f64,
}

/// Full training state; serialized as the checkpoint container.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Params,
    pub opt: AdamW,
    pub ema: Ema,
    pub rngs: TrainRngs,
    pub phase: TrainPhase,
    pub step: u64,
    pub latent_scale: f64,
    pub config_text: String,
}

impl Checkpoint {
    pub fn fresh(
        params: Params,
        opt_config: OptimConfig,
        ema_decay: f64,
        master_seed: u64,
        phase: TrainPhase,
        latent_scale: f64,
        config_text: String,
    ) -> Self {
        let ema = Ema::init(&params, ema_decay, dit::is_dit_param);
        Self {
            params,
            opt: AdamW::new(opt_config),
            ema,
            rngs: TrainRngs::new(master_seed),
            phase,
            step: 0,
            latent_scale,
            config_text,
        }
    }

    /// Parameters with the EMA shadow swapped in; what sampling should use.
    pub fn eval_params(&self) -> Result<Params> {
        let mut p = self.params.clone();
        self.ema.apply_to(&mut p)?;
        Ok(p)
    }
}

/// Options for one phase run.
#[derive(Debug, Clone)]
pub struct PhaseOptions {
    pub phase: TrainPhase,
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a periodic checkpoint every this many epochs (0 = only final).
    pub checkpoint_every: usize,
}

/// Run one training phase over a dataset of cached posteriors.
///
/// Latents are re-sampled from the posterior each epoch, scaled by the global
/// latent scale. In the finetune phase batches are bucketed by length.
/// The VAE is checksummed every epoch to guarantee it stayed frozen.
pub fn run_phase(
    state: &mut Checkpoint,
    cfg: &DiTConfig,
    sched: &NoiseSchedule,
    dataset: &[TrainItem],
    options: &PhaseOptions,
    curve: &mut Vec<CurvePoint>,
    mut checkpoint_sink: impl FnMut(&Checkpoint, usize) -> Result<()>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if options.phase == TrainPhase::Finetune && state.phase == TrainPhase::Finetune && state.step == 0
    {
        return Err(Error::Precondition(
            "finetune requires a pretrain checkpoint".into(),
        ));
    }
    state.phase = options.phase;
    let trainable = freeze_mask(options.phase, &state.params, cfg)?;
    let vae_checksum = state.params.checksum_matching(is_vae_param);

    for epoch in 0..options.epochs {
        // draw latents for this epoch, then order and batch
        let mut order = state.rngs.data.shuffled_indices(dataset.len());
        if options.phase == TrainPhase::Finetune {
            // bucket by latent length so batches stay homogeneous
            order.sort_by_key(|&i| dataset[i].posterior.mean.nrows());
        }
        let latents: Vec<Array2<f64>> = {
            let mut out = vec![Array2::zeros((0, 0)); dataset.len()];
            for &i in &order {
                let z = vae_sample(&dataset[i].posterior, state.rngs.data.next_u64());
                out[i] = z.values * state.latent_scale;
            }
            out
        };
        let mut batch_starts: Vec<usize> = (0..order.len()).step_by(options.batch_size).collect();
        if options.phase == TrainPhase::Finetune {
            // deterministic batch-order shuffle from the data stream
            let perm = state.rngs.data.shuffled_indices(batch_starts.len());
            batch_starts = perm.into_iter().map(|i| batch_starts[i]).collect();
        }

        for start in batch_starts {
            let end = (start + options.batch_size).min(order.len());
            let batch: Vec<(usize, &Array2<f64>, &ConditionMatrix)> = order[start..end]
                .iter()
                .map(|&i| (i, &latents[i], &dataset[i].cond))
                .collect();
            let lr = state.opt.effective_lr(state.opt.step);
            let loss = train_step(
                &mut state.params,
                cfg,
                sched,
                &mut state.opt,
                &mut state.ema,
                &trainable,
                &batch,
                &mut state.rngs,
            )?;
            state.step += 1;
            curve.push(CurvePoint { step: state.step, phase: options.phase.name(), loss, lr });
        }

        if state.params.checksum_matching(is_vae_param) != vae_checksum {
            return Err(Error::RegistryInconsistency(
                "frozen vae parameters changed during diffusion training".into(),
            ));
        }
        let last = epoch + 1 == options.epochs;
        if last || (options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0) {
            checkpoint_sink(state, epoch + 1)?;
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LOVACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 2;
const DTYPE_U8: u8 = 3;
const DTYPE_U64: u8 = 5;

fn push_record_f64(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    push_header(buf, name, tensor.shape(), DTYPE_F64);
    for v in tensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_record_bytes(buf: &mut Vec<u8>, name: &str, bytes: &[u8]) {
    push_header(buf, name, &[bytes.len()], DTYPE_U8);
    buf.extend_from_slice(bytes);
}

fn push_record_u64(buf: &mut Vec<u8>, name: &str, value: u64) {
    push_header(buf, name, &[1], DTYPE_U64);
    buf.extend_from_slice(&value.to_le_bytes());
}

fn push_header(buf: &mut Vec<u8>, name: &str, dims: &[usize], dtype: u8) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for d in dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    buf.push(dtype);
}

enum RecordValue {
    F64(Tensor),
    Bytes(Vec<u8>),
    U64(u64),
}

struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> RecordReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated record"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn next_record(&mut self) -> Result<Option<(String, RecordValue)>> {
        if self.pos == self.bytes.len() {
            return Ok(None);
        }
        let name_len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::format(self.path, "non-utf8 record name"))?;
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize);
        }
        let dtype = self.take(1)?[0];
        let count: usize = dims.iter().product();
        let value = match dtype {
            DTYPE_F64 => {
                let raw = self.take(count * 8)?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                RecordValue::F64(
                    ArrayD::from_shape_vec(IxDyn(&dims), data)
                        .map_err(|e| Error::format(self.path, e.to_string()))?,
                )
            }
            DTYPE_U8 => RecordValue::Bytes(self.take(count)?.to_vec()),
            DTYPE_U64 => {
                let raw = self.take(8)?;
                RecordValue::U64(u64::from_le_bytes(raw.try_into().unwrap()))
            }
            other => return Err(Error::format(self.path, format!("unknown dtype tag {other}"))),
        };
        Ok(Some((name, value)))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        for (name, t) in self.params.iter() {
            push_record_f64(&mut buf, &format!("param/{name}"), t);
        }
        for (name, t) in &self.opt.m {
            push_record_f64(&mut buf, &format!("opt/m/{name}"), t);
        }
        for (name, t) in &self.opt.v {
            push_record_f64(&mut buf, &format!("opt/v/{name}"), t);
        }
        push_record_u64(&mut buf, "opt/step", self.opt.step);
        let oc = &self.opt.config;
        let opt_cfg = ndarray::arr1(&[
            oc.lr,
            oc.beta1,
            oc.beta2,
            oc.eps,
            oc.weight_decay,
            oc.warmup_steps as f64,
            oc.clip_norm,
        ]);
        push_record_f64(&mut buf, "opt/config", &opt_cfg.into_dyn());
        for (name, t) in &self.ema.shadow {
            push_record_f64(&mut buf, &format!("ema/{name}"), t);
        }
        push_record_f64(&mut buf, "ema/decay", &ndarray::arr1(&[self.ema.decay]).into_dyn());
        for (label, stream) in [
            ("data", &self.rngs.data),
            ("t", &self.rngs.timestep),
            ("eps", &self.rngs.noise),
            ("dropout", &self.rngs.dropout),
        ] {
            let (seed, pos) = stream.state();
            push_record_bytes(&mut buf, &format!("rng/{label}/seed"), &seed);
            push_record_bytes(&mut buf, &format!("rng/{label}/pos"), &pos.to_le_bytes());
        }
        push_record_bytes(&mut buf, "meta/phase", self.phase.name().as_bytes());
        push_record_u64(&mut buf, "meta/step", self.step);
        push_record_f64(
            &mut buf,
            "meta/latent_scale",
            &ndarray::arr1(&[self.latent_scale]).into_dyn(),
        );
        push_record_bytes(&mut buf, "meta/config", self.config_text.as_bytes());

        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }

        let mut reader = RecordReader { bytes: &bytes, pos: 12, path };
        let mut params = Params::new();
        let mut opt_m = IndexMap::new();
        let mut opt_v = IndexMap::new();
        let mut opt_step = 0u64;
        let mut opt_cfg: Option<Vec<f64>> = None;
        let mut ema_shadow = IndexMap::new();
        let mut ema_decay = 0.999;
        let mut rng_parts: std::collections::BTreeMap<String, Vec<u8>> = Default::default();
        let mut phase = TrainPhase::Pretrain;
        let mut step = 0u64;
        let mut latent_scale = 1.0;
        let mut config_text = String::new();

        while let Some((name, value)) = reader.next_record()? {
            match (name.as_str(), value) {
                (n, RecordValue::F64(t)) if n.starts_with("param/") => {
                    params.insert(n.trim_start_matches("param/").to_string(), t);
                }
                (n, RecordValue::F64(t)) if n.starts_with("opt/m/") => {
                    opt_m.insert(n.trim_start_matches("opt/m/").to_string(), t);
                }
                (n, RecordValue::F64(t)) if n.starts_with("opt/v/") => {
                    opt_v.insert(n.trim_start_matches("opt/v/").to_string(), t);
                }
                ("opt/step", RecordValue::U64(v)) => opt_step = v,
                ("opt/config", RecordValue::F64(t)) => opt_cfg = Some(t.iter().copied().collect()),
                ("ema/decay", RecordValue::F64(t)) => ema_decay = t[[0]],
                (n, RecordValue::F64(t)) if n.starts_with("ema/") => {
                    ema_shadow.insert(n.trim_start_matches("ema/").to_string(), t);
                }
                (n, RecordValue::Bytes(b)) if n.starts_with("rng/") => {
                    rng_parts.insert(n.to_string(), b);
                }
                ("meta/phase", RecordValue::Bytes(b)) => {
                    phase = TrainPhase::parse(std::str::from_utf8(&b).unwrap_or("?"))
                        .map_err(|e| Error::format(path, e.to_string()))?;
                }
                ("meta/step", RecordValue::U64(v)) => step = v,
                ("meta/latent_scale", RecordValue::F64(t)) => latent_scale = t[[0]],
                ("meta/config", RecordValue::Bytes(b)) => {
                    config_text = String::from_utf8(b)
                        .map_err(|_| Error::format(path, "non-utf8 config snapshot"))?;
                }
                (n, _) => return Err(Error::format(path, format!("unexpected record {n}"))),
            }
        }

        let cfg_vals = opt_cfg.ok_or_else(|| Error::format(path, "missing opt/config"))?;
        if cfg_vals.len() != 7 {
            return Err(Error::format(path, "bad opt/config length"));
        }
        let opt = AdamW {
            config: OptimConfig {
                lr: cfg_vals[0],
                beta1: cfg_vals[1],
                beta2: cfg_vals[2],
                eps: cfg_vals[3],
                weight_decay: cfg_vals[4],
                warmup_steps: cfg_vals[5] as usize,
                clip_norm: cfg_vals[6],
            },
            step: opt_step,
            m: opt_m,
            v: opt_v,
        };

        let restore = |label: &str| -> Result<RngStream> {
            let seed = rng_parts
                .get(&format!("rng/{label}/seed"))
                .ok_or_else(|| Error::format(path, format!("missing rng/{label}/seed")))?;
            let pos = rng_parts
                .get(&format!("rng/{label}/pos"))
                .ok_or_else(|| Error::format(path, format!("missing rng/{label}/pos")))?;
            let seed: [u8; 32] =
                seed.as_slice().try_into().map_err(|_| Error::format(path, "bad rng seed"))?;
            let pos = u128::from_le_bytes(
                pos.as_slice().try_into().map_err(|_| Error::format(path, "bad rng pos"))?,
            );
            Ok(RngStream::restore(seed, pos))
        };
        let rngs = TrainRngs {
            data: restore("data")?,
            timestep: restore("t")?,
            noise: restore("eps")?,
            dropout: restore("dropout")?,
        };

        Ok(Checkpoint {
            params,
            opt,
            ema: Ema { decay: ema_decay, shadow: ema_shadow },
            rngs,
            phase,
            step,
            latent_scale,
            config_text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn tiny_cfg() -> DiTConfig {
        DiTConfig {
            depth: 2,
            heads: 2,
            token_dim: 6,
            cond_dim: 4,
            mlp_ratio: 2.0,
            max_tokens: 12,
            max_cond_len: 8,
        }
    }

    fn setup(seed: u64) -> (DiTConfig, Params, NoiseSchedule) {
        let cfg = tiny_cfg();
        let mut params = Params::new();
        let mut rng = RngStream::new(seed, "init");
        crate::vae::vae_init(
            &mut params,
            &crate::vae::VaeConfig {
                channels: 1,
                latent_dim: 3,
                strides: vec![2, 2],
                widths: vec![3],
                beta: 1e-4,
            },
            &mut rng,
        );
        dit::dit_init(&mut params, &cfg, &mut rng);
        let sched = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        (cfg, params, sched)
    }

    fn toy_dataset(cfg: &DiTConfig, n: usize, len: usize, seed: u64) -> Vec<TrainItem> {
        let mut rng = RngStream::new(seed, "data");
        (0..n)
            .map(|_| TrainItem {
                posterior: VaePosterior {
                    mean: rng.normal_mat(len, cfg.token_dim),
                    log_variance: Array2::from_elem((len, cfg.token_dim), -8.0),
                },
                cond: ConditionMatrix::new(rng.normal_mat(4, cfg.cond_dim)).unwrap(),
            })
            .collect()
    }

    fn fresh_state(params: Params, seed: u64) -> Checkpoint {
        Checkpoint::fresh(
            params,
            OptimConfig { lr: 1e-3, warmup_steps: 5, ..Default::default() },
            0.999,
            seed,
            TrainPhase::Pretrain,
            1.0,
            "test".into(),
        )
    }

    #[test]
    fn freeze_masks_have_expected_structure() {
        let (cfg, params, _) = setup(0);
        let pre = freeze_mask(TrainPhase::Pretrain, &params, &cfg).unwrap();
        let fine = freeze_mask(TrainPhase::Finetune, &params, &cfg).unwrap();
        // finetune mask never touches the vae
        assert!(fine.iter().all(|n| !is_vae_param(n)));
        assert!(pre.iter().all(|n| !is_vae_param(n)));
        // pretrain is a superset of finetune
        assert!(fine.is_subset(&pre));
        // finetune trains exactly pe_z, pe_c and the last block
        assert!(fine.contains("dit.pe_z"));
        assert!(fine.contains("cond.pe_c"));
        assert!(fine.iter().any(|n| n.starts_with("dit.b1.")));
        assert!(!fine.iter().any(|n| n.starts_with("dit.b0.")));
        assert!(!fine.contains("cond.null"));
        assert!(!fine.contains("dit.final.head.w"));
    }

    #[test]
    fn finetune_mask_size_matches_config_arithmetic() {
        let (cfg, params, _) = setup(1);
        let fine = freeze_mask(TrainPhase::Finetune, &params, &cfg).unwrap();
        let count: usize = fine.iter().map(|n| params.get(n).unwrap().len()).sum();
        let describe = cfg.describe();
        let lookup = |key: &str| -> usize {
            describe.iter().find(|(k, _)| k == key).map(|(_, n)| *n).unwrap()
        };
        let expected = lookup("dit.pe_z")
            + lookup("cond.pe_c")
            + lookup(&format!("dit.b{}", cfg.depth - 1));
        assert_eq!(count, expected);
    }

    #[test]
    fn unknown_parameter_group_is_registry_error() {
        let (cfg, mut params, _) = setup(2);
        params.insert("mystery.w", Array2::<f64>::zeros((1, 1)).into_dyn());
        assert!(matches!(
            freeze_mask(TrainPhase::Pretrain, &params, &cfg),
            Err(Error::RegistryInconsistency(_))
        ));
    }

    #[test]
    fn initial_loss_is_unit_noise_energy() {
        // zero-init head predicts 0, so the loss is mean(eps^2) ~ 1
        let (cfg, params, sched) = setup(3);
        let mut rng = RngStream::new(4, "mc");
        let cond = ConditionMatrix::new(rng.normal_mat(3, cfg.cond_dim)).unwrap();
        let z0 = rng.normal_mat(5, cfg.token_dim);
        let draws = 200;
        let mut total = 0.0;
        for i in 0..draws {
            let t = rng.uniform_usize(sched.num_steps);
            let eps = NoiseDraw { epsilon: rng.normal_mat(5, cfg.token_dim), seed: i };
            total +=
                diffusion_loss(&params, &cfg, &sched, &z0, &cond, false, t, &eps, None).unwrap();
        }
        let mean = total / draws as f64;
        // each loss is a mean of 30 squared normals; MC std ~ sqrt(2/30)/sqrt(200)
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn finetune_leaves_frozen_params_bit_identical() {
        let (cfg, params, sched) = setup(5);
        let mut state = fresh_state(params, 6);
        state.phase = TrainPhase::Finetune;
        let dataset = toy_dataset(&cfg, 4, 6, 7);
        let trainable = freeze_mask(TrainPhase::Finetune, &state.params, &cfg).unwrap();
        let frozen_before = state.params.checksum_matching(|n| !trainable.contains(n));
        let trained_before = state.params.checksum_matching(|n| trainable.contains(n));
        for _ in 0..100 {
            let z0 = dataset[0].posterior.mean.clone();
            let batch = vec![(0usize, &z0, &dataset[0].cond)];
            train_step(
                &mut state.params,
                &cfg,
                &sched,
                &mut state.opt,
                &mut state.ema,
                &trainable,
                &batch,
                &mut state.rngs,
            )
            .unwrap();
        }
        assert_eq!(state.params.checksum_matching(|n| !trainable.contains(n)), frozen_before);
        assert_ne!(state.params.checksum_matching(|n| trainable.contains(n)), trained_before);
    }

    #[test]
    fn zero_epochs_returns_state_unchanged() {
        let (cfg, params, sched) = setup(8);
        let mut state = fresh_state(params, 9);
        let before = state.params.checksum_matching(|_| true);
        let dataset = toy_dataset(&cfg, 2, 4, 10);
        let mut curve = Vec::new();
        run_phase(
            &mut state,
            &cfg,
            &sched,
            &dataset,
            &PhaseOptions {
                phase: TrainPhase::Pretrain,
                epochs: 0,
                batch_size: 2,
                checkpoint_every: 0,
            },
            &mut curve,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(state.params.checksum_matching(|_| true), before);
        assert!(curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let run = || {
            let (cfg, params, sched) = setup(11);
            let mut state = fresh_state(params, 12);
            let dataset = toy_dataset(&cfg, 4, 5, 13);
            let mut curve = Vec::new();
            run_phase(
                &mut state,
                &cfg,
                &sched,
                &dataset,
                &PhaseOptions {
                    phase: TrainPhase::Pretrain,
                    epochs: 3,
                    batch_size: 2,
                    checkpoint_every: 0,
                },
                &mut curve,
                |_, _| Ok(()),
            )
            .unwrap();
            (curve.iter().map(|c| c.loss).collect::<Vec<_>>(), state.params.checksum_matching(|_| true))
        };
        let (la, ca) = run();
        let (lb, cb) = run();
        assert_eq!(la, lb);
        assert_eq!(ca, cb);
    }

    #[test]
    fn resume_reproduces_remaining_trajectory_bit_exactly() {
        let (cfg, params, sched) = setup(14);
        let dataset = toy_dataset(&cfg, 4, 5, 15);
        let dir = tempfile::tempdir().unwrap();
        let ckpt_path = dir.path().join("mid.ckpt");

        // straight 6-epoch run
        let mut full = fresh_state(params.clone(), 16);
        let mut full_curve = Vec::new();
        run_phase(
            &mut full,
            &cfg,
            &sched,
            &dataset,
            &PhaseOptions { phase: TrainPhase::Pretrain, epochs: 6, batch_size: 2, checkpoint_every: 0 },
            &mut full_curve,
            |_, _| Ok(()),
        )
        .unwrap();

        // 3 epochs, checkpoint, resume 3 more
        let mut half = fresh_state(params, 16);
        let mut half_curve = Vec::new();
        run_phase(
            &mut half,
            &cfg,
            &sched,
            &dataset,
            &PhaseOptions { phase: TrainPhase::Pretrain, epochs: 3, batch_size: 2, checkpoint_every: 0 },
            &mut half_curve,
            |state, _| state.save(&ckpt_path),
        )
        .unwrap();
        let mut resumed = Checkpoint::load(&ckpt_path).unwrap();
        run_phase(
            &mut resumed,
            &cfg,
            &sched,
            &dataset,
            &PhaseOptions { phase: TrainPhase::Pretrain, epochs: 3, batch_size: 2, checkpoint_every: 0 },
            &mut half_curve,
            |_, _| Ok(()),
        )
        .unwrap();

        let full_losses: Vec<f64> = full_curve.iter().map(|c| c.loss).collect();
        let half_losses: Vec<f64> = half_curve.iter().map(|c| c.loss).collect();
        assert_eq!(full_losses, half_losses);
        assert_eq!(
            full.params.checksum_matching(|_| true),
            resumed.params.checksum_matching(|_| true)
        );
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (cfg, params, sched) = setup(17);
        let mut state = fresh_state(params, 18);
        let dataset = toy_dataset(&cfg, 2, 4, 19);
        let mut curve = Vec::new();
        run_phase(
            &mut state,
            &cfg,
            &sched,
            &dataset,
            &PhaseOptions { phase: TrainPhase::Pretrain, epochs: 2, batch_size: 2, checkpoint_every: 0 },
            &mut curve,
            |_, _| Ok(()),
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        state.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(
            state.params.checksum_matching(|_| true),
            loaded.params.checksum_matching(|_| true)
        );
        assert_eq!(state.step, loaded.step);
        assert_eq!(state.phase, loaded.phase);
        assert_eq!(state.opt.step, loaded.opt.step);
        assert_eq!(state.latent_scale, loaded.latent_scale);
        assert_eq!(state.config_text, loaded.config_text);
        for (name, t) in &state.opt.m {
            assert_eq!(t, &loaded.opt.m[name]);
        }
        for (name, t) in &state.ema.shadow {
            assert_eq!(t, &loaded.ema.shadow[name]);
        }
        // a second save of the loaded state produces identical bytes
        let path2 = dir.path().join("y.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn lr_zero_keeps_params_fixed() {
        let (cfg, params, sched) = setup(20);
        let mut state = Checkpoint::fresh(
            params,
            OptimConfig { lr: 0.0, ..Default::default() },
            0.999,
            21,
            TrainPhase::Pretrain,
            1.0,
            String::new(),
        );
        let before = state.params.checksum_matching(|_| true);
        let dataset = toy_dataset(&cfg, 2, 4, 22);
        let trainable = freeze_mask(TrainPhase::Pretrain, &state.params, &cfg).unwrap();
        let z0 = dataset[0].posterior.mean.clone();
        let batch = vec![(0usize, &z0, &dataset[0].cond)];
        train_step(
            &mut state.params,
            &cfg,
            &sched,
            &mut state.opt,
            &mut state.ema,
            &trainable,
            &batch,
            &mut state.rngs,
        )
        .unwrap();
        assert_eq!(state.params.checksum_matching(|_| true), before);
    }
}
