//! AdamW with linear warmup and global-norm gradient clipping, plus an EMA
//! shadow of the weights.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::{Grads, Params, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 500,
            clip_norm: 1.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers exist only for parameters the
/// optimizer has actually touched, so frozen tensors never acquire state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn effective_lr(&self, step: u64) -> f64 {
        let warm = self.config.warmup_steps as f64;
        if warm > 0.0 && (step as f64) < warm {
            self.config.lr * (step as f64 + 1.0) / warm
        } else {
            self.config.lr
        }
    }

    /// Apply one update to every parameter in `trainable`. Gradients are
    /// scaled in place when the global norm exceeds the clip threshold.
    /// Returns the learning rate that was applied.
    pub fn apply(
        &mut self,
        params: &mut Params,
        grads: &mut Grads,
        trainable: &BTreeSet<String>,
    ) -> Result<f64> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::TrainingDiverged(format!("gradient norm is {norm}")));
        }
        if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            grads.scale(self.config.clip_norm / norm);
        }

        let lr = self.effective_lr(self.step);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bias1 = 1.0 - b1.powi(self.step as i32 + 1);
        let bias2 = 1.0 - b2.powi(self.step as i32 + 1);

        for name in trainable {
            let Some(g) = grads.get(name) else { continue };
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip(m, g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            azip(v, g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bias1;
                let vhat = vv / bias2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + self.config.weight_decay * *pv);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

fn azip(a: &mut Tensor, b: &Tensor, f: impl Fn(&mut f64, f64)) {
    for (x, y) in a.iter_mut().zip(b.iter()) {
        f(x, *y);
    }
}

/// Exponential moving average of a parameter subset.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub shadow: IndexMap<String, Tensor>,
}

impl Ema {
    /// Snapshot every parameter matching `pred` as the EMA starting point.
    pub fn init(params: &Params, decay: f64, pred: impl Fn(&str) -> bool) -> Self {
        let shadow = params
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        Self { decay, shadow }
    }

    pub fn update(&mut self, params: &Params) {
        for (name, s) in self.shadow.iter_mut() {
            let p = &params.get(name).expect("ema tracks registered params");
            for (sv, pv) in s.iter_mut().zip(p.iter()) {
                *sv = self.decay * *sv + (1.0 - self.decay) * pv;
            }
        }
    }

    /// Copy the shadow values over the live parameters (used for eval).
    pub fn apply_to(&self, params: &mut Params) -> Result<()> {
        for (name, s) in &self.shadow {
            *params.get_mut(name)? = s.clone();
        }
        Ok(())
    }
}
