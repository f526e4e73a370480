//! Noise schedule, forward noising and reverse stepping.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, and `ᾱ_0 = 1` by convention so that
//! stepping from `t` to `prev = 0` returns the clean estimate.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// How β is interpolated between the first and last step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    /// β linear in t.
    #[default]
    Linear,
    /// √β linear in t (the Stable Diffusion "scaled linear" convention).
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ddpm,
    #[default]
    Ddim,
}

/// Per-step tables, stored in double precision. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
    /// Bound applied to the denoised estimate `x̂_0` in [`p_step`].
    pub x0_clip: Option<f64>,
}

pub const DEFAULT_X0_CLIP: f64 = 1.5;

impl NoiseSchedule {
    /// Linear-in-β schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(steps, beta_start, beta_end, BetaSpacing::Linear)
    }

    pub fn new(steps: usize, beta_start: f64, beta_end: f64, spacing: BetaSpacing) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Param {
                name: "steps_total",
                reason: format!("must be at least 1, got {steps}"),
            });
        }
        if !(beta_start > 0.0) {
            return Err(Error::Param {
                name: "beta_start",
                reason: format!("must be > 0, got {beta_start}"),
            });
        }
        if !(beta_end < 1.0) {
            return Err(Error::Param {
                name: "beta_end",
                reason: format!("must be < 1, got {beta_end}"),
            });
        }
        if beta_start > beta_end {
            return Err(Error::Param {
                name: "beta_start",
                reason: format!("must not exceed beta_end ({beta_start} > {beta_end})"),
            });
        }
        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let beta: Vec<f64> = (0..steps)
            .map(|i| match spacing {
                BetaSpacing::Linear => beta_start + (beta_end - beta_start) * frac(i),
                BetaSpacing::ScaledLinear => {
                    let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac(i);
                    s * s
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma2 = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            sigma2,
            x0_clip: Some(DEFAULT_X0_CLIP),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Single-step posterior variance `σ_t²`; also the guidance scale.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(contract(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    /// `count` uniformly spaced steps from `T` down to 1, each paired with
    /// the step it moves to (0 for the last one).
    pub fn sampling_plan(&self, count: usize) -> Vec<StepIndex> {
        let count = count.clamp(1, self.steps);
        let ts: Vec<usize> = if count == 1 {
            vec![self.steps]
        } else {
            (0..count)
                .map(|i| {
                    let x = 1.0 + (self.steps - 1) as f64 * (count - 1 - i) as f64 / (count - 1) as f64;
                    x.round() as usize
                })
                .collect()
        };
        ts.iter()
            .enumerate()
            .map(|(i, &t)| StepIndex {
                t,
                prev: ts.get(i + 1).copied().unwrap_or(0),
            })
            .collect()
    }
}

/// One reverse transition `t → prev` (`prev < t`, `prev = 0` is terminal).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndex {
    pub t: usize,
    pub prev: usize,
}

impl StepIndex {
    pub fn single(t: usize) -> Self {
        Self { t, prev: t - 1 }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Option<Tensor>,
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<DiffusionSample> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(contract(format!(
            "noise shape {:?} differs from sample shape {:?}",
            eps.dims(),
            x0.dims()
        )));
    }
    let ab = sched.alpha_bar(t);
    let x_t = (x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(DiffusionSample {
        x_t,
        t,
        eps: Some(eps.clone()),
    })
}

/// Denoised estimate `x̂_0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, clipped by the schedule's bound.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let x0 = (x_t - eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?;
    Ok(match sched.x0_clip {
        Some(c) => x0.clamp(-c, c)?,
        None => x0,
    })
}

/// One reverse step. DDPM returns the posterior mean plus `σ·noise`; DDIM
/// is deterministic.
pub fn p_step(
    x_t: &Tensor,
    step: StepIndex,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let StepIndex { t, prev } = step;
    sched.check_t(t)?;
    if prev >= t {
        return Err(contract(format!("cannot step from {t} to {prev}")));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(contract("predicted noise shape differs from x_t"));
    }
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    if prev == 0 {
        return Ok(x0);
    }
    let ab_t = sched.alpha_bar(t);
    let ab_p = sched.alpha_bar(prev);
    match mode {
        SamplerMode::Ddim => {
            // Noise direction consistent with the (possibly clipped) x̂_0.
            let eps = (x_t - x0.affine(ab_t.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab_t).sqrt(), 0.0)?;
            Ok((x0.affine(ab_p.sqrt(), 0.0)? + eps.affine((1.0 - ab_p).sqrt(), 0.0)?)?)
        }
        SamplerMode::Ddpm => {
            let Some(noise) = noise else {
                return Err(contract("ddpm step with t > 1 needs a noise sample"));
            };
            if noise.shape() != x_t.shape() {
                return Err(contract("noise shape differs from x_t"));
            }
            let a = ab_t / ab_p;
            let b = 1.0 - a;
            let c0 = ab_p.sqrt() * b / (1.0 - ab_t);
            let ct = a.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
            let var = b * (1.0 - ab_p) / (1.0 - ab_t);
            let mean = (x0.affine(c0, 0.0)? + x_t.affine(ct, 0.0)?)?;
            Ok((mean + noise.affine(var.sqrt(), 0.0)?)?)
        }
    }
}

fn per_item(ts: &[usize], like: &Tensor, f: impl Fn(usize) -> f64) -> Result<Tensor> {
    let n = like.dim(0)?;
    if ts.len() != n {
        return Err(contract(format!("{} timesteps for a batch of {n}", ts.len())));
    }
    let mut shape = vec![n];
    shape.resize(like.rank(), 1);
    let v: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
    Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
}

/// [`q_sample`] with one timestep per batch item.
pub fn q_sample_each(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    for &t in ts {
        sched.check_t(t)?;
    }
    if x0.shape() != eps.shape() {
        return Err(contract("noise shape differs from sample shape"));
    }
    let a = per_item(ts, x0, |t| sched.alpha_bar(t).sqrt())?;
    let b = per_item(ts, x0, |t| (1.0 - sched.alpha_bar(t)).sqrt())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// [`predict_x0`] with one timestep per batch item.
pub fn predict_x0_each(x_t: &Tensor, ts: &[usize], eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    for &t in ts {
        sched.check_t(t)?;
    }
    let b = per_item(ts, x_t, |t| (1.0 - sched.alpha_bar(t)).sqrt())?;
    let inv = per_item(ts, x_t, |t| 1.0 / sched.alpha_bar(t).sqrt())?;
    let x0 = (x_t - eps_hat.broadcast_mul(&b)?)?.broadcast_mul(&inv)?;
    Ok(match sched.x0_clip {
        Some(c) => x0.clamp(-c, c)?,
        None => x0,
    })
}

/// Mean squared error between true and predicted noise, as a differentiable scalar.
pub fn noise_loss(eps_true: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps_true.shape() != eps_hat.shape() {
        return Err(contract(format!(
            "noise_loss shapes differ: {:?} vs {:?}",
            eps_true.dims(),
            eps_hat.dims()
        )));
    }
    Ok((eps_hat - eps_true)?.sqr()?.mean_all()?)
}
