//! Noise schedules, forward noising and the single reverse step.
//!
//! Timesteps are 1-indexed: `t = 1..=T`. Tables are kept in `f64` and cast
//! to the tensor element type at use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the reverse-step noise scale is derived from the schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t = sqrt(beta_t)`.
    #[default]
    Beta,
    /// `sigma_t = sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))`.
    Posterior,
}

/// Parameters of a linear beta schedule, as stored in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    mode: SigmaMode,
}

impl NoiseSchedule {
    /// `beta_t = start + (t - 1) (end - start) / (T - 1)`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64, mode: SigmaMode) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + i as f64 * (beta_end - beta_start) / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, mode)
    }

    /// Schedule from an explicit beta table (`betas[t - 1]`), each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>, mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta table".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside [0, 1)")));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self::assemble(betas, alpha, alpha_bar, mode))
    }

    fn assemble(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>, mode: SigmaMode) -> Self {
        let sigma = (0..beta.len())
            .map(|i| match mode {
                SigmaMode::Beta => beta[i].sqrt(),
                SigmaMode::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    let denom = 1.0 - alpha_bar[i];
                    if denom > 0.0 {
                        (beta[i] * (1.0 - prev) / denom).sqrt()
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
            mode,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.mode
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Keeps `K` timesteps at uniform stride (always including `T`) and
    /// re-derives per-step alphas so that `alpha_bar` is unchanged at the
    /// kept steps.
    pub fn subsample(&self, steps: usize) -> Result<Respaced> {
        let t_max = self.timesteps();
        if steps == 0 || steps > t_max {
            return Err(Error::InvalidArgument(format!(
                "sampling steps {steps} outside 1..={t_max}"
            )));
        }
        let kept: Vec<usize> = (1..=steps).map(|k| k * t_max / steps).collect();
        let mut beta = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prev_t = 0;
        for &t in &kept {
            if t == prev_t + 1 {
                // consecutive steps keep the original entries bit-for-bit
                beta.push(self.beta(t));
                alpha.push(self.alpha(t));
            } else {
                let prev_bar = if prev_t == 0 { 1.0 } else { self.alpha_bar(prev_t) };
                let a = self.alpha_bar(t) / prev_bar;
                alpha.push(a);
                beta.push(1.0 - a);
            }
            alpha_bar.push(self.alpha_bar(t));
            prev_t = t;
        }
        Ok(Respaced {
            schedule: Self::assemble(beta, alpha, alpha_bar, self.mode),
            timesteps: kept,
        })
    }
}

/// A reduced schedule plus the original timestep each new step stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct Respaced {
    pub schedule: NoiseSchedule,
    /// `timesteps[k - 1]` is the original `t` used to condition step `k`.
    pub timesteps: Vec<usize>,
}

/// `u_t = sqrt(abar_t) u_0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(sched: &NoiseSchedule, u0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    u0.zip_map(eps, "q_sample", |u, e| a * u + b * e)
}

/// Forward noising with an independent timestep per batch element.
pub fn q_sample_batch<T: Scalar>(
    sched: &NoiseSchedule,
    u0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if u0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", u0.shape(), eps.shape()));
    }
    let batch = u0.shape()[0];
    if ts.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} timesteps for batch of {batch}",
            ts.len()
        )));
    }
    let per = u0.numel() / batch;
    let mut out = Vec::with_capacity(u0.numel());
    for (n, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
        let range = n * per..(n + 1) * per;
        out.extend(u0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&u, &e)| a * u + b * e));
    }
    Tensor::new(u0.shape(), out)
}

/// One reverse-diffusion step:
/// `u_{t-1} = (u_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z`.
///
/// `z` must be absent (or all zeros) at `t = 1`.
pub fn reverse_step<T: Scalar>(
    sched: &NoiseSchedule,
    ut: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    z: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let alpha = sched.alpha(t);
    let coef = T::from_f64_lossy((1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv_sqrt_alpha = T::from_f64_lossy(1.0 / alpha.sqrt());
    let mean = ut.zip_map(eps_hat, "reverse_step", |u, e| (u - coef * e) * inv_sqrt_alpha)?;
    match z {
        None => Ok(mean),
        Some(z) => {
            if t == 1 && z.data().iter().any(|v| *v != T::zero()) {
                return Err(Error::InvalidArgument("reverse step at t = 1 must not add noise".into()));
            }
            let sigma = T::from_f64_lossy(sched.sigma(t));
            mean.zip_map(z, "reverse_step", |m, z| m + sigma * z)
        }
    }
}
