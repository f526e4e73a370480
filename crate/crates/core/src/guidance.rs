//! Flow-guided sampling: a bidirectional warping energy over the latent clip
//! and the gradient correction applied after each reverse-diffusion step.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{p_step, NoiseSchedule, SamplerMode, StepIndex};
use crate::error::{contract, Error, Result};
use crate::flow::{estimate_flow_frames, FlowParams};
use crate::frame::Frame;
use crate::nn::abs0;
use crate::warp::{warp_tensor, FlowField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowRefresh {
    /// Re-estimate flows from the current clean estimate at every step.
    EveryStep,
    /// Estimate once from the guidance frames.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    /// Multiplier on the schedule variance used as the step size.
    pub lambda: f64,
    /// Divide the energy by its element count.
    pub normalize: bool,
    /// Halvings tried when a full step would raise the energy.
    pub max_halvings: usize,
    pub flow_refresh: FlowRefresh,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 1.0,
            normalize: false,
            max_halvings: 8,
            flow_refresh: FlowRefresh::EveryStep,
        }
    }
}

/// Displacement fields between consecutive frames.
///
/// `backward[i]` lives on frame `i+1` and warps frame `i` onto it;
/// `forward[i]` lives on frame `i` and warps frame `i+1` onto it.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

impl FlowPair {
    pub fn zeros(frames: usize, h: usize, w: usize) -> Self {
        let n = frames.saturating_sub(1);
        Self {
            forward: vec![FlowField::zeros((h, w, 2)); n],
            backward: vec![FlowField::zeros((h, w, 2)); n],
        }
    }

    /// Estimates both directions for every consecutive pair.
    pub fn estimate(frames: &[Frame], params: &FlowParams) -> Result<Self> {
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for pair in frames.windows(2) {
            forward.push(estimate_flow_frames(&pair[0], &pair[1], params)?);
            backward.push(estimate_flow_frames(&pair[1], &pair[0], params)?);
        }
        Ok(Self { forward, backward })
    }

    pub fn check(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        let pairs = frames.saturating_sub(1);
        if self.forward.len() != pairs || self.backward.len() != pairs {
            return Err(contract(format!(
                "{} frames need {pairs} flows each way, got {} forward and {} backward",
                frames,
                self.forward.len(),
                self.backward.len()
            )));
        }
        for f in self.forward.iter().chain(&self.backward) {
            if f.dim() != (h, w, 2) {
                return Err(contract(format!("flow {:?} does not match latent {h}x{w}", f.dim())));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(contract("flow contains non-finite values"));
            }
        }
        Ok(())
    }
}

/// Bidirectional warping energy of a latent clip `N×d×h×w` (scalar tensor).
pub fn motion_error(latents: &Tensor, flows: &FlowPair, normalize: bool) -> Result<Tensor> {
    let (n, d, h, w) = latents.dims4()?;
    flows.check(n, h, w)?;
    let mut total = Tensor::zeros((), latents.dtype(), latents.device())?;
    if n < 2 {
        return Ok(total);
    }
    for i in 0..n - 1 {
        let zi = latents.get(i)?;
        let zj = latents.get(i + 1)?;
        let to_next = (warp_tensor(&zi, &flows.backward[i])? - &zj)?;
        let to_prev = (warp_tensor(&zj, &flows.forward[i])? - &zi)?;
        total = (total + abs0(&to_next)?.sum_all()? + abs0(&to_prev)?.sum_all()?)?;
    }
    if normalize {
        total = (total / (2 * (n - 1) * d * h * w) as f64)?;
    }
    Ok(total)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Gradient of the motion error with respect to the latents.
pub fn motion_error_grad(latents: &Tensor, flows: &FlowPair, normalize: bool) -> Result<(f64, Tensor)> {
    let var = Var::from_tensor(&latents.detach())?;
    let e = motion_error(var.as_tensor(), flows, normalize)?;
    let grads = e.backward()?;
    let g = match grads.get(&var) {
        Some(g) => g.clone(),
        None => latents.zeros_like()?,
    };
    Ok((scalar(&e)?, g))
}

/// Outcome of one guidance correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceState {
    /// Energy at the unguided step output.
    pub e_before: f64,
    /// Energy after the correction (never above `e_before`).
    pub e_after: f64,
    pub sigma2: f64,
    /// Fraction of the full step that was accepted.
    pub step_fraction: f64,
    pub enabled: bool,
}

/// Moves `base` against the motion-error gradient by `lambda·sigma2`,
/// halving the step until the energy does not increase.
pub fn guide_latents(base: &Tensor, sigma2: f64, flows: Option<&FlowPair>, cfg: &GuidanceConfig) -> Result<(Tensor, GuidanceState)> {
    let mut state = GuidanceState {
        e_before: 0.0,
        e_after: 0.0,
        sigma2,
        step_fraction: 0.0,
        enabled: cfg.enabled,
    };
    if !cfg.enabled {
        return Ok((base.clone(), state));
    }
    let Some(flows) = flows else {
        return Err(Error::Config("guidance is enabled but no flows were supplied".into()));
    };
    let n = base.dim(0)?;
    if n < 2 || sigma2 == 0.0 || cfg.lambda == 0.0 {
        flows.check(n, base.dim(2)?, base.dim(3)?)?;
        return Ok((base.clone(), state));
    }
    let (e0, grad) = motion_error_grad(base, flows, cfg.normalize)?;
    state.e_before = e0;
    state.e_after = e0;
    let mut scale = cfg.lambda * sigma2;
    for _ in 0..=cfg.max_halvings {
        let candidate = (base - (&grad * scale)?)?;
        let e = scalar(&motion_error(&candidate, flows, cfg.normalize)?)?;
        if e <= e0 {
            state.e_after = e;
            state.step_fraction = scale / (cfg.lambda * sigma2);
            return Ok((candidate, state));
        }
        scale *= 0.5;
    }
    Ok((base.clone(), state))
}

/// One reverse step followed by the guidance correction. `predict` maps
/// `(x_t, step)` to the predicted noise.
pub fn guided_step<F>(
    z_t: &Tensor,
    step: StepIndex,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    noise: Option<&Tensor>,
    flows: Option<&FlowPair>,
    cfg: &GuidanceConfig,
    predict: F,
) -> Result<(Tensor, GuidanceState)>
where
    F: FnOnce(&Tensor, StepIndex) -> Result<Tensor>,
{
    let eps = predict(z_t, step)?;
    let base = p_step(z_t, step, &eps, sched, mode, noise)?;
    guide_latents(&base, sched.sigma2(step.t), flows, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use candle_core::{DType, Device};

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn random_flows(n: usize, h: usize, w: usize, seed: u64) -> FlowPair {
        let mut rng = seeded(seed);
        let mut field = || {
            let v = crate::rng::gaussian_vec(&mut rng, h * w * 2);
            FlowField::from_shape_vec((h, w, 2), v.into_iter().map(|x| 0.6 * x).collect()).unwrap()
        };
        FlowPair {
            forward: (0..n - 1).map(|_| field()).collect(),
            backward: (0..n - 1).map(|_| field()).collect(),
        }
    }

    #[test]
    fn single_frame_has_zero_energy() {
        let z = gaussian(&mut seeded(0), (1, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let e = motion_error(&z, &FlowPair::zeros(1, 3, 3), false).unwrap();
        assert_eq!(e.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn identical_frames_with_zero_flow_have_zero_energy() {
        let z = gaussian(&mut seeded(0), (1, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let clip = Tensor::cat(&[&z, &z, &z], 0).unwrap();
        let e = motion_error(&clip, &FlowPair::zeros(3, 3, 3), false).unwrap();
        assert_eq!(e.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let a = [0.1, 0.4, -0.2, 0.0];
        let b = [0.3, 0.1, -0.2, 0.5];
        let z = Tensor::from_vec([a, b].concat(), (2, 1, 2, 2), &Device::Cpu).unwrap();
        // Zero flow: each direction contributes Σ|a − b| = 0.2 + 0.3 + 0 + 0.5.
        let e = motion_error(&z, &FlowPair::zeros(2, 2, 2), false).unwrap().to_scalar::<f64>().unwrap();
        assert!((e - 2.0).abs() < 1e-12);
        let en = motion_error(&z, &FlowPair::zeros(2, 2, 2), true).unwrap().to_scalar::<f64>().unwrap();
        assert!((en - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mismatched_flows_rejected() {
        let z = Tensor::zeros((3, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(motion_error(&z, &FlowPair::zeros(2, 2, 2), false).is_err());
        assert!(motion_error(&z, &FlowPair::zeros(3, 2, 3), false).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (h, w) = (4, 4);
        let z = gaussian(&mut seeded(7), (2, 2, h, w), DType::F64, &Device::Cpu).unwrap();
        let flows = random_flows(2, h, w, 8);
        let (_, g) = motion_error_grad(&z, &flows, false).unwrap();
        let g = vals(&g);
        let base = vals(&z);
        let eps = 1e-6;
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let t = Tensor::from_vec(v, (2, 2, h, w), &Device::Cpu).unwrap();
                motion_error(&t, &flows, false).unwrap().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "i={i}: fd={fd} ad={}", g[i]);
        }
    }

    #[test]
    fn zero_scale_and_single_frame_are_exact_reductions() {
        let cfg = GuidanceConfig::default();
        let z = gaussian(&mut seeded(1), (3, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let flows = random_flows(3, 4, 4, 2);
        let (out, _) = guide_latents(&z, 0.0, Some(&flows), &cfg).unwrap();
        assert_eq!(vals(&out), vals(&z));
        let z1 = z.narrow(0, 0, 1).unwrap();
        let (out1, st) = guide_latents(&z1, 0.01, Some(&FlowPair::zeros(1, 4, 4)), &cfg).unwrap();
        assert_eq!(vals(&out1), vals(&z1));
        assert_eq!(st.e_before, 0.0);
    }

    #[test]
    fn disabled_guidance_is_a_pass_through() {
        let cfg = GuidanceConfig { enabled: false, ..GuidanceConfig::default() };
        let z = gaussian(&mut seeded(1), (3, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let (out, _) = guide_latents(&z, 0.5, None, &cfg).unwrap();
        assert_eq!(vals(&out), vals(&z));
        assert!(guide_latents(&z, 0.5, None, &GuidanceConfig::default()).is_err());
    }

    #[test]
    fn guided_step_with_zero_variance_equals_base_step() {
        let sched = NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap();
        let z = gaussian(&mut seeded(3), (2, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let eps = gaussian(&mut seeded(4), (2, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let step = StepIndex { t: 1, prev: 0 };
        let flows = random_flows(2, 4, 4, 5);
        let (got, _) = guided_step(&z, step, &sched, SamplerMode::Ddim, None, Some(&flows), &GuidanceConfig::default(), |_, _| Ok(eps.clone())).unwrap();
        let base = p_step(&z, step, &eps, &sched, SamplerMode::Ddim, None).unwrap();
        // σ² at t = 1 is zero.
        assert_eq!(vals(&got), vals(&base));
    }

    #[test]
    fn correction_reduces_energy() {
        let z = gaussian(&mut seeded(11), (3, 4, 6, 6), DType::F32, &Device::Cpu).unwrap();
        let flows = random_flows(3, 6, 6, 12);
        let (_, st) = guide_latents(&z, 0.01, Some(&flows), &GuidanceConfig::default()).unwrap();
        assert!(st.e_after < st.e_before, "{st:?}");
    }
}
