//! Decoder-side reconstruction: temporal blending inside the VAE decoder,
//! encoder/decoder feature fusion, and per-frame colour correction.

use candle_core::{Tensor, Var};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::frame::Frame;
use crate::nn::{softmax_last, Conv2d, Init, Linear, ParamStore};
use crate::vae::{DecoderHook, EncoderFeatures, HookSite, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StamConfig {
    /// Temporal extent of the 3-D convolution (odd). 1 makes it frame-local.
    pub temporal_kernel: usize,
}

impl Default for StamConfig {
    fn default() -> Self {
        Self { temporal_kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub omega: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { omega: 0.75 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Param {
                name: "fusion.omega",
                reason: format!("{} is outside [0, 1]", self.omega),
            });
        }
        Ok(())
    }
}

/// Clamp to [0,1] in the forward pass with an identity gradient.
fn unit_clamp_st(raw: &Tensor) -> Result<Tensor> {
    let clamped = raw.clamp(0.0, 1.0)?;
    Ok((raw + (clamped - raw)?.detach())?)
}

/// Learnable blend of a temporal 3-D convolution and cross-frame attention.
pub struct Stam {
    pub alpha_raw: Var,
    pub beta_raw: Var,
    conv3d: Conv2d,
    query: Linear,
    key: Linear,
    kt: usize,
    channels: usize,
}

impl Stam {
    /// Registers group `stam`.
    pub fn new(ps: &ParamStore, channels: usize, cfg: &StamConfig) -> Result<Self> {
        if cfg.temporal_kernel % 2 == 0 {
            return Err(Error::Param {
                name: "stam.temporal_kernel",
                reason: "must be odd".into(),
            });
        }
        let ps = ps.pp("stam");
        let kt = cfg.temporal_kernel;
        Ok(Self {
            alpha_raw: ps.get(channels, "alpha", Init::Zeros)?,
            beta_raw: ps.get(channels, "beta", Init::Zeros)?,
            conv3d: Conv2d::new(&ps.pp("conv3d"), kt * channels, channels, 3, 1)?,
            query: Linear::new(&ps.pp("query"), channels, channels)?,
            key: Linear::new(&ps.pp("key"), channels, channels)?,
            kt,
            channels,
        })
    }

    pub fn alpha(&self) -> Result<Tensor> {
        unit_clamp_st(self.alpha_raw.as_tensor())
    }

    pub fn beta(&self) -> Result<Tensor> {
        unit_clamp_st(self.beta_raw.as_tensor())
    }

    pub fn set_blend(&self, alpha: f64, beta: f64) -> Result<()> {
        let c = self.channels;
        let dev = self.alpha_raw.device();
        let dt = self.alpha_raw.dtype();
        self.alpha_raw.set(&Tensor::full(alpha, c, dev)?.to_dtype(dt)?)?;
        self.beta_raw.set(&Tensor::full(beta, c, dev)?.to_dtype(dt)?)?;
        Ok(())
    }

    /// 3-D convolution over the frame axis of `N×C×H×W`, zero-padded in time.
    pub fn conv3d(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        let r = self.kt / 2;
        if r == 0 {
            return self.conv3d.forward(z);
        }
        let pad = Tensor::zeros((r, c, h, w), z.dtype(), z.device())?;
        let padded = Tensor::cat(&[&pad, z, &pad], 0)?;
        let stacked: Vec<Tensor> = (0..self.kt).map(|o| padded.narrow(0, o, n)).collect::<candle_core::Result<_>>()?;
        self.conv3d.forward(&Tensor::cat(&stacked, 1)?)
    }

    /// Self-attention across frames at every spatial site; values are the
    /// raw tokens.
    pub fn temporal_attention(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        let tokens = z.permute((2, 3, 0, 1))?.reshape((h * w, n, c))?;
        let q = self.query.forward(&tokens)?;
        let k = self.key.forward(&tokens)?;
        let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
        let out = softmax_last(&scores)?.matmul(&tokens)?;
        Ok(out.reshape((h, w, n, c))?.permute((2, 3, 0, 1))?.contiguous()?)
    }

    /// The α/β blend applied between the spatial residual blocks.
    pub fn blend(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.channels {
            return Err(contract(format!("temporal stage expects {} channels, got {c}", self.channels)));
        }
        let alpha = self.alpha()?.reshape((1, c, 1, 1))?;
        let beta = self.beta()?.reshape((1, c, 1, 1))?;
        let c3 = self.conv3d(z)?;
        let z1 = (z + (c3 - z)?.broadcast_mul(&alpha)?)?;
        let ta = self.temporal_attention(&z1)?;
        Ok((&z1 + (ta - &z1)?.broadcast_mul(&beta)?)?)
    }
}

impl DecoderHook for Stam {
    fn apply(&self, site: HookSite, x: &Tensor, _enc: Option<&EncoderFeatures>) -> Result<Tensor> {
        match site {
            HookSite::Temporal => self.blend(x),
            _ => Ok(x.clone()),
        }
    }
}

/// Full spatio-temporal stage on per-frame decoder features `N×C×H×W`
/// (frames along the batch axis).
pub fn stam_forward(vae: &Vae, stam: Option<&Stam>, z_clip: &Tensor) -> Result<Tensor> {
    match stam {
        Some(s) => vae.spatial_stage(z_clip, &[s]),
        None => vae.spatial_stage(z_clip, &[]),
    }
}

/// Zero-initialised residual fusion of encoder and decoder features.
pub struct Cfw {
    conv: Conv2d,
}

impl Cfw {
    /// Registers group `cfw`.
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::zeroed(&ps.pp("cfw").pp("conv"), 2 * channels, channels, 3)?,
        })
    }

    pub fn fuse(&self, f_e: &Tensor, f_d: &Tensor, omega: f64) -> Result<Tensor> {
        if f_e.dims() != f_d.dims() {
            return Err(contract(format!("encoder features {:?} not aligned with decoder {:?}", f_e.dims(), f_d.dims())));
        }
        if omega == 0.0 {
            return Ok(f_d.clone());
        }
        let r = self.conv.forward(&Tensor::cat(&[f_e, f_d], 1)?)?;
        Ok((f_d + (r * omega)?)?)
    }
}

/// Decoder hook applying [`Cfw::fuse`] with the encoder's full-resolution features.
pub struct CfwHook<'a> {
    pub cfw: &'a Cfw,
    pub omega: f64,
}

impl DecoderHook for CfwHook<'_> {
    fn apply(&self, site: HookSite, x: &Tensor, enc: Option<&EncoderFeatures>) -> Result<Tensor> {
        if site != HookSite::Fusion {
            return Ok(x.clone());
        }
        let Some(f_e) = enc.and_then(|e| e.levels.first()) else {
            return Err(Error::Config("feature fusion needs encoder features".into()));
        };
        self.cfw.fuse(f_e, x, self.omega)
    }
}

pub const COLOR_EPS: f64 = 1e-6;

/// Per-channel mean and population standard deviation.
pub fn channel_stats(frame: &Frame) -> Vec<(f64, f64)> {
    frame
        .axis_iter(Axis(2))
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect()
}

/// Matches each channel's mean and standard deviation to the reference.
pub fn color_correct(sr: &Frame, reference: &Frame) -> Result<Frame> {
    if sr.dim() != reference.dim() {
        return Err(contract(format!("frame {:?} and reference {:?} differ", sr.dim(), reference.dim())));
    }
    let s = channel_stats(sr);
    let r = channel_stats(reference);
    let mut out = sr.clone();
    for (k, mut ch) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (ms, ss) = s[k];
        let (mr, sr_) = r[k];
        let gain = sr_ / ss.max(COLOR_EPS);
        ch.mapv_inplace(|v| ((v as f64 - ms) * gain + mr).clamp(0.0, 1.0) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use crate::vae::VaeConfig;
    use candle_core::{DType, Device};

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn set(v: &Var, data: Vec<f64>) {
        v.set(&Tensor::from_vec(data, v.shape(), v.device()).unwrap().to_dtype(v.dtype()).unwrap()).unwrap();
    }

    #[test]
    fn zero_blend_is_the_spatial_path() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let vae = Vae::new(&ps, &VaeConfig::default()).unwrap();
        let stam = Stam::new(&ps, vae.temporal_width(), &StamConfig::default()).unwrap();
        let z = gaussian(&mut seeded(1), (3, 32, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let a = stam_forward(&vae, Some(&stam), &z).unwrap();
        let b = stam_forward(&vae, None, &z).unwrap();
        assert_eq!(vals(&a), vals(&b));
    }

    #[test]
    fn single_frame_attention_returns_its_value() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let stam = Stam::new(&ps, 4, &StamConfig::default()).unwrap();
        let z = gaussian(&mut seeded(2), (1, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(vals(&stam.temporal_attention(&z).unwrap()), vals(&z));
        stam.set_blend(0.4, 0.9).unwrap();
        let alpha_only = {
            let c3 = stam.conv3d(&z).unwrap();
            (&z + ((c3 - &z).unwrap() * 0.4).unwrap()).unwrap()
        };
        let got = stam.blend(&z).unwrap();
        let diff = vals(&got).iter().zip(vals(&alpha_only)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn two_frame_attention_matches_hand_arithmetic() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let stam = Stam::new(&ps, 1, &StamConfig { temporal_kernel: 1 }).unwrap();
        set(&stam.query.weight, vec![2.0]);
        set(&stam.key.weight, vec![0.5]);
        let z = Tensor::from_vec(vec![1.0f64, 3.0], (2, 1, 1, 1), &Device::Cpu).unwrap();
        let out = vals(&stam.temporal_attention(&z).unwrap());
        // q = 2z, k = z/2, score(i,j) = z_i z_j.
        let manual = |i: f64| {
            let s = [i * 1.0, i * 3.0];
            let m = s[0].max(s[1]);
            let e = [(s[0] - m).exp(), (s[1] - m).exp()];
            (e[0] * 1.0 + e[1] * 3.0) / (e[0] + e[1])
        };
        assert!((out[0] - manual(1.0)).abs() < 1e-6);
        assert!((out[1] - manual(3.0)).abs() < 1e-6);
    }

    #[test]
    fn blend_weights_are_clamped_but_pass_gradients() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let stam = Stam::new(&ps, 2, &StamConfig::default()).unwrap();
        set(&stam.alpha_raw, vec![-0.5, 1.7]);
        assert_eq!(vals(&stam.alpha().unwrap()), vec![0.0, 1.0]);
        stam.set_blend(0.0, 0.0).unwrap();
        let g = stam.alpha().unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(vals(g.get(&stam.alpha_raw).unwrap()), vec![1.0, 1.0]);
    }

    #[test]
    fn frame_local_configuration_is_permutation_equivariant() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 3);
        let stam = Stam::new(&ps, 4, &StamConfig { temporal_kernel: 1 }).unwrap();
        stam.set_blend(0.6, 0.7).unwrap();
        let z = gaussian(&mut seeded(4), (3, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let perm = Tensor::from_vec(vec![2u32, 0, 1], 3, &Device::Cpu).unwrap();
        let a = stam.blend(&z).unwrap().index_select(&perm, 0).unwrap();
        let b = stam.blend(&z.index_select(&perm, 0).unwrap()).unwrap();
        let diff = vals(&a).iter().zip(vals(&b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn even_temporal_kernel_rejected() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        assert!(Stam::new(&ps, 4, &StamConfig { temporal_kernel: 2 }).is_err());
    }

    #[test]
    fn fusion_reductions() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let cfw = Cfw::new(&ps, 4).unwrap();
        let fe = gaussian(&mut seeded(5), (2, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let fd = gaussian(&mut seeded(6), (2, 4, 3, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(vals(&cfw.fuse(&fe, &fd, 0.0).unwrap()), vals(&fd));
        // Zero-initialised fusion: ω has no effect.
        assert_eq!(vals(&cfw.fuse(&fe, &fd, 1.0).unwrap()), vals(&cfw.fuse(&fe, &fd, 0.3).unwrap()));
        let bad = Tensor::zeros((2, 4, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(cfw.fuse(&bad, &fd, 0.5).is_err());
        assert!(FusionConfig { omega: 1.2 }.validate().is_err());
    }

    #[test]
    fn color_self_reference_is_identity() {
        let f = Frame::from_shape_fn((4, 5, 3), |(i, j, k)| 0.1 + 0.05 * ((i * 3 + j * 7 + k) % 11) as f32);
        let out = color_correct(&f, &f).unwrap();
        for (a, b) in out.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_reference_gives_constant_channel() {
        let f = Frame::from_shape_fn((3, 3, 1), |(i, j, _)| (i + j) as f32 * 0.1);
        let r = Frame::from_elem((3, 3, 1), 0.42);
        assert!(color_correct(&f, &r).unwrap().iter().all(|&v| (v - 0.42).abs() < 1e-7));
    }

    #[test]
    fn two_by_two_hand_case() {
        // Channel 0: sr (0.1, 0.2, 0.3, 0.4) μ=0.25 σ=√0.0125; ref (0.5, 0.5, 0.7, 0.7) μ=0.6 σ=0.1.
        // Channel 1: sr (0.6, 0.6, 0.2, 0.2) μ=0.4 σ=0.2; ref (0.3, 0.1, 0.3, 0.1) μ=0.2 σ=0.1.
        let sr = Frame::from_shape_vec((2, 2, 2), vec![0.1, 0.6, 0.2, 0.6, 0.3, 0.2, 0.4, 0.2]).unwrap();
        let rf = Frame::from_shape_vec((2, 2, 2), vec![0.5, 0.3, 0.5, 0.1, 0.7, 0.3, 0.7, 0.1]).unwrap();
        let out = color_correct(&sr, &rf).unwrap();
        let g0 = 0.1 / 0.0125f64.sqrt();
        let want0 = [0.1, 0.2, 0.3, 0.4].map(|v: f64| (v - 0.25) * g0 + 0.6);
        let want1 = [0.6, 0.6, 0.2, 0.2].map(|v: f64| (v - 0.4) * 0.5 + 0.2);
        for p in 0..4 {
            let (i, j) = (p / 2, p % 2);
            assert!((out[[i, j, 0]] as f64 - want0[p]).abs() < 1e-7);
            assert!((out[[i, j, 1]] as f64 - want1[p]).abs() < 1e-7);
        }
    }
}
