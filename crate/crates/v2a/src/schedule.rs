//! Noise schedule, forward diffusion, the epsilon-prediction training loss,
//! and classifier-free guidance combination.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Precomputed cumulative signal fractions for the forward process.
///
/// Index i corresponds to step i+1 of a 1-based T-step process, so
/// `alpha_bar[0]` is already slightly below 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub alpha_bar: Vec<f64>,
}

const COSINE_S: f64 = 0.008;

fn cosine_f(t: f64, num_steps: f64) -> f64 {
    let x = ((t / num_steps + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

pub fn make_schedule(kind: ScheduleKind, num_steps: usize) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "noise schedule needs at least 2 steps, got {num_steps}"
        )));
    }
    let alpha_bar = match kind {
        ScheduleKind::Cosine => {
            // alpha_bar[i] = f(i+1)/f(0), except that the per-step beta is
            // capped at 0.999 so the final entries cannot collapse to zero
            let t_max = num_steps as f64;
            let mut acc = 1.0;
            (1..=num_steps)
                .map(|t| {
                    let ratio = cosine_f(t as f64, t_max) / cosine_f(t as f64 - 1.0, t_max);
                    let beta = (1.0 - ratio).min(0.999);
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
        ScheduleKind::Linear => {
            let beta_start = 1e-4;
            let beta_end = 0.02;
            let mut acc = 1.0;
            (0..num_steps)
                .map(|i| {
                    let beta =
                        beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64;
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
    };
    let sched = NoiseSchedule { num_steps, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    /// Build from raw values; used by tests and custom schedules.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let sched = NoiseSchedule { num_steps: alpha_bar.len(), alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.num_steps || self.num_steps < 2 {
            return Err(Error::InvalidArgument("schedule length mismatch".into()));
        }
        for (i, &a) in self.alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "alpha_bar[{i}] = {a} outside (0, 1]"
                )));
            }
            if i > 0 && a >= self.alpha_bar[i - 1] {
                return Err(Error::InvalidArgument(format!(
                    "alpha_bar must be strictly decreasing at index {i}"
                )));
            }
        }
        // endpoint sanity only meaningful at practical resolutions
        if self.num_steps >= 100 {
            if self.alpha_bar[0] < 0.999 {
                return Err(Error::InvalidArgument(format!(
                    "alpha_bar[0] = {} below 0.999",
                    self.alpha_bar[0]
                )));
            }
            let last = *self.alpha_bar.last().unwrap();
            if last > 0.01 {
                return Err(Error::InvalidArgument(format!("alpha_bar[last] = {last} above 0.01")));
            }
        }
        Ok(())
    }

    /// sigma_t = sqrt((1 - abar) / abar), the noise level in denoised units.
    pub fn sigma(&self, t: usize) -> f64 {
        let a = self.alpha_bar[t];
        ((1.0 - a) / a).sqrt()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma(0)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma(self.num_steps - 1)
    }

    /// Fractional timestep whose sigma is closest to the query, interpolated
    /// in log-sigma; clamped to the table range.
    pub fn timestep_for_sigma(&self, sigma: f64) -> f64 {
        if sigma <= self.sigma_min() {
            return 0.0;
        }
        if sigma >= self.sigma_max() {
            return (self.num_steps - 1) as f64;
        }
        let target = sigma.ln();
        // log-sigma is increasing in t; binary search for the bracket
        let (mut lo, mut hi) = (0usize, self.num_steps - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.sigma(mid).ln() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (a, b) = (self.sigma(lo).ln(), self.sigma(hi).ln());
        lo as f64 + (target - a) / (b - a)
    }
}

/// A reproducible standard-normal draw shaped like the latent it perturbs.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub epsilon: Array2<f64>,
    pub seed: u64,
}

impl NoiseDraw {
    pub fn sample(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, "noise-draw");
        NoiseDraw { epsilon: rng.normal_mat(rows, cols), seed }
    }
}

/// z_t = sqrt(abar)*z0 + sqrt(1-abar)*eps for an explicit abar value.
pub fn diffuse_with_alpha_bar(
    z0: &Array2<f64>,
    eps: &Array2<f64>,
    alpha_bar: f64,
) -> Result<Array2<f64>> {
    if z0.raw_dim() != eps.raw_dim() {
        return Err(Error::InvalidArgument(format!(
            "latent shape {:?} does not match noise shape {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    Ok(z0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt())
}

/// Forward process at schedule step `t` (zero-based).
pub fn forward_diffuse(
    z0: &Array2<f64>,
    t: usize,
    eps: &NoiseDraw,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t >= sched.num_steps {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside schedule of {} steps",
            sched.num_steps
        )));
    }
    diffuse_with_alpha_bar(z0, &eps.epsilon, sched.alpha_bar[t])
}

/// Mean squared error between predicted and drawn noise.
pub fn denoising_loss(eps_hat: &Array2<f64>, eps: &Array2<f64>) -> Result<f64> {
    if eps_hat.raw_dim() != eps.raw_dim() {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} does not match noise shape {:?}",
            eps_hat.shape(),
            eps.shape()
        )));
    }
    let n = eps_hat.len() as f64;
    Ok(eps_hat
        .iter()
        .zip(eps.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gradient of [`denoising_loss`] w.r.t. `eps_hat`.
pub fn denoising_loss_grad(eps_hat: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    let n = eps_hat.len() as f64;
    (eps_hat - eps) * (2.0 / n)
}

/// eps_uncond + scale * (eps_cond - eps_uncond).
pub fn cfg_combine(
    eps_cond: &Array2<f64>,
    eps_uncond: &Array2<f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    if eps_cond.raw_dim() != eps_uncond.raw_dim() {
        return Err(Error::InvalidArgument(format!(
            "conditional shape {:?} does not match unconditional shape {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    Ok(eps_uncond + &((eps_cond - eps_uncond) * scale))
}
