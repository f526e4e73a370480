//! Compression-aware prompts: a bank of learnable components mixed by
//! weights pooled from the host feature, injected back into the host
//! decoder through a zero-initialised convolution.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{self_attention, softmax_last, Conv2d, Init, LayerNorm, Linear, ParamStore};
use crate::vae::{DecoderHook, EncoderFeatures, HookSite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapmConfig {
    #[serde(alias = "K")]
    pub k: usize,
    pub prompt_hw: usize,
    /// UNet decoder levels hosting a bank (0 = finest).
    pub levels: Vec<usize>,
    /// VAE decoder levels hosting a bank (0 = latent resolution).
    pub vae_levels: Vec<usize>,
    /// Normalise the weight vector with a softmax (ablation variant only).
    pub softmax_weights: bool,
}

impl Default for CapmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            prompt_hw: 8,
            levels: vec![0, 1, 2],
            vae_levels: vec![0, 1],
            softmax_weights: false,
        }
    }
}

/// Row-interpolation matrix `out × src` for half-pixel bilinear resizing.
pub fn bilinear_matrix(out: usize, src: usize) -> Vec<f32> {
    let mut m = vec![0f32; out * src];
    for i in 0..out {
        let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let f = (pos - i0 as f64) as f32;
        m[i * src + i0] += 1.0 - f;
        m[i * src + i1] += f;
    }
    m
}

/// Bilinear resize of `N×C×h×w` to `N×C×H×W` (differentiable).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let flat = x.reshape((n * c, h, w))?;
    let y = ry.broadcast_matmul(&flat)?.broadcast_matmul(&rx.t()?)?;
    Ok(y.reshape((n, c, out_h, out_w))?)
}

struct TokenBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TokenBlock {
    fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), dim)?,
            qkv: Linear::new(&ps.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&ps.pp("proj"), dim, dim)?,
            norm2: LayerNorm::new(&ps.pp("norm2"), dim)?,
            fc1: Linear::new(&ps.pp("fc1"), dim, 2 * dim)?,
            fc2: Linear::new(&ps.pp("fc2"), 2 * dim, dim)?,
            dim,
        })
    }

    /// `x: B×L×D`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self_attention(&self.norm1.forward(x)?, &self.qkv, &self.proj, self.dim)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + m)?)
    }
}

/// One prompt bank with its weight encoder and injection block.
pub struct PromptBank {
    pub k: usize,
    pub channels: usize,
    aux: Conv2d,
    pub components: Var,
    prompt_conv: Conv2d,
    block: TokenBlock,
    out: Conv2d,
    softmax: bool,
}

impl PromptBank {
    pub fn new(ps: &ParamStore, channels: usize, cfg: &CapmConfig) -> Result<Self> {
        if cfg.k == 0 {
            return Err(crate::error::Error::Param { name: "capm.K", reason: "must be at least 1".into() });
        }
        let hp = cfg.prompt_hw.max(1);
        Ok(Self {
            k: cfg.k,
            channels,
            aux: Conv2d::new(&ps.pp("aux"), channels, cfg.k, 3, 1)?,
            components: ps.get((cfg.k, channels, hp, hp), "components", Init::Normal(0.02))?,
            prompt_conv: Conv2d::new(&ps.pp("prompt_conv"), channels, channels, 3, 1)?,
            block: TokenBlock::new(&ps.pp("block"), 2 * channels)?,
            out: Conv2d::zeroed(&ps.pp("out"), 2 * channels, channels, 3)?,
            softmax: cfg.softmax_weights,
        })
    }

    /// Weight vector `N×K`: global average of a 3×3 convolution.
    pub fn weights(&self, z: &Tensor) -> Result<Tensor> {
        let v = self.aux.forward(z)?.mean(3)?.mean(2)?;
        if self.softmax {
            softmax_last(&v)
        } else {
            Ok(v)
        }
    }

    /// Prompt map `N×C×H×W` from weights `N×K`.
    pub fn prompt(&self, v: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
        let (n, k) = v.dims2()?;
        if k != self.k {
            return Err(contract(format!("weight vector has {k} entries, bank has {}", self.k)));
        }
        let (_, c, hp, wp) = self.components.dims4()?;
        let mixed = v.matmul(&self.components.reshape((k, c * hp * wp))?)?.reshape((n, c, hp, wp))?;
        let resized = resize_bilinear(&mixed, target_hw.0, target_hw.1)?;
        self.prompt_conv.forward(&resized)
    }

    /// Injection residual with `z`'s shape.
    pub fn inject(&self, z: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        if prompt.dims() != z.dims() {
            return Err(contract(format!("prompt {:?} does not match feature {:?}", prompt.dims(), z.dims())));
        }
        let x = Tensor::cat(&[z, prompt], 1)?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?;
        let y = self.block.forward(&tokens)?.transpose(1, 2)?.reshape((n, 2 * c, h, w))?;
        self.out.forward(&y)
    }

    /// `inject(z, prompt(weights(z)))`; the host adds this to `z`.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = z.dims4()?;
        let v = self.weights(z)?;
        let p = self.prompt(&v, (h, w))?;
        Ok((self.inject(z, &p)?, v))
    }
}

/// Banks for one host network, keyed by level. Acts as a decoder hook that
/// adds the injection residual at each hosted level.
pub struct PromptSet {
    pub banks: BTreeMap<usize, PromptBank>,
    weight_log: RefCell<Vec<(usize, f64)>>,
    record: bool,
}

impl PromptSet {
    /// `widths[i]` is the host width at level `i`. Registers under `ps`.
    pub fn new(ps: &ParamStore, levels: &[usize], widths: &[usize], cfg: &CapmConfig) -> Result<Self> {
        let mut banks = BTreeMap::new();
        for &level in levels {
            let Some(&c) = widths.get(level) else {
                return Err(crate::error::Error::Config(format!(
                    "prompt level {level} does not exist (host has {} levels)",
                    widths.len()
                )));
            };
            banks.insert(level, PromptBank::new(&ps.pp(format!("level{level}")), c, cfg)?);
        }
        Ok(Self {
            banks,
            weight_log: RefCell::new(Vec::new()),
            record: false,
        })
    }

    /// Keep `(level, mean |v|)` for every call until taken.
    pub fn recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    pub fn set_recording(&mut self, on: bool) {
        self.record = on;
    }

    pub fn take_weight_log(&self) -> Vec<(usize, f64)> {
        std::mem::take(&mut *self.weight_log.borrow_mut())
    }
}

impl DecoderHook for PromptSet {
    fn apply(&self, site: HookSite, x: &Tensor, _enc: Option<&EncoderFeatures>) -> Result<Tensor> {
        let HookSite::Level(level) = site else { return Ok(x.clone()) };
        let Some(bank) = self.banks.get(&level) else { return Ok(x.clone()) };
        let (residual, v) = bank.forward(x)?;
        if self.record {
            let m = v.abs()?.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            self.weight_log.borrow_mut().push((level, m));
        }
        Ok((x + residual)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cfg(k: usize, hp: usize) -> CapmConfig {
        CapmConfig { k, prompt_hw: hp, ..CapmConfig::default() }
    }

    fn set(v: &Var, data: Vec<f64>) {
        v.set(&Tensor::from_vec(data, v.shape(), v.device()).unwrap().to_dtype(v.dtype()).unwrap()).unwrap();
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn zero_feature_with_zero_bias_gives_zero_weights() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let b = PromptBank::new(&ps, 4, &cfg(5, 8)).unwrap();
        let v = b.weights(&Tensor::zeros((2, 4, 6, 6), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(v.dims(), &[2, 5]);
        assert!(vals(&v).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weights_ignore_block_permutation() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let b = PromptBank::new(&ps, 1, &cfg(2, 4)).unwrap();
        // 1×1 aux kernel so pooling sees a pointwise map; blocks of equal mean swapped.
        let w = b.aux.weight.as_tensor().clone();
        let mut centre = vec![0.0; w.elem_count()];
        centre[4] = 0.7;
        centre[13] = -0.3;
        set(&b.aux.weight, centre);
        let a: Vec<f64> = vec![1., 1., 0., 0., 1., 1., 0., 0., 2., 2., 3., 3., 2., 2., 3., 3.];
        let p: Vec<f64> = vec![2., 2., 3., 3., 2., 2., 3., 3., 1., 1., 0., 0., 1., 1., 0., 0.];
        let ta = Tensor::from_vec(a, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let tp = Tensor::from_vec(p, (1, 1, 4, 4), &Device::Cpu).unwrap();
        for (x, y) in vals(&b.weights(&ta).unwrap()).iter().zip(vals(&b.weights(&tp).unwrap())) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_match_hand_arithmetic() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let b = PromptBank::new(&ps, 1, &cfg(2, 2)).unwrap();
        // Kernel 0: centre 1, right neighbour 0.5. Kernel 1: all ones. Bias (0.1, -0.2).
        let mut k = vec![0.0; 18];
        k[4] = 1.0;
        k[5] = 0.5;
        for x in &mut k[9..18] {
            *x = 1.0;
        }
        set(&b.aux.weight, k);
        set(&b.aux.bias, vec![0.1, -0.2]);
        let z = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        // Kernel 0 outputs: (1+1, 2+0, 3+2, 4+0) = (2, 2, 5, 4); mean 3.25 + 0.1.
        // Kernel 1 with zero padding sums all four pixels everywhere: 10; + (-0.2).
        let v = vals(&b.weights(&z).unwrap());
        assert!((v[0] - 3.35).abs() < 1e-6, "{v:?}");
        assert!((v[1] - 9.8).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn single_component_prompt_is_conv_of_resized_component() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 1);
        let b = PromptBank::new(&ps, 3, &cfg(1, 4)).unwrap();
        let v = Tensor::ones((1, 1), DType::F64, &Device::Cpu).unwrap();
        let got = b.prompt(&v, (6, 6)).unwrap();
        let want = b.prompt_conv.forward(&resize_bilinear(&b.components.as_tensor().clone(), 6, 6).unwrap()).unwrap();
        let diff: f64 = vals(&got).iter().zip(vals(&want)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn zero_weights_leave_only_the_bias() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 1);
        let b = PromptBank::new(&ps, 3, &cfg(4, 4)).unwrap();
        let v = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(vals(&b.prompt(&v, (5, 5)).unwrap()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_component_mix_matches_direct_sum() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 1);
        let b = PromptBank::new(&ps, 1, &cfg(2, 2)).unwrap();
        set(&b.components, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]);
        // Identity 3×3 conv so the prompt equals the resized mix.
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        set(&b.prompt_conv.weight, k);
        let v = Tensor::from_vec(vec![2.0f64, -1.0], (1, 2), &Device::Cpu).unwrap();
        let got = vals(&b.prompt(&v, (2, 2)).unwrap());
        let want = [2.0 * 1.0 + 1.0, 2.0 * 2.0 - 0.5, 2.0 * 3.0 - 0.0, 2.0 * 4.0 - 2.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_matrix_rows_sum_to_one() {
        for (o, s) in [(16, 8), (8, 8), (4, 8), (7, 3)] {
            let m = bilinear_matrix(o, s);
            for r in 0..o {
                let sum: f32 = m[r * s..(r + 1) * s].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn injection_is_zero_at_init_and_shape_preserving() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 2);
        let b = PromptBank::new(&ps, 8, &cfg(5, 8)).unwrap();
        let z = crate::rng::gaussian(&mut crate::rng::seeded(3), (2, 8, 6, 5), DType::F32, &Device::Cpu).unwrap();
        let (r, _) = b.forward(&z).unwrap();
        assert_eq!(r.dims(), z.dims());
        assert!(vals(&r).iter().all(|&x| x == 0.0));
        let wrong = Tensor::zeros((2, 8, 6, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(b.inject(&z, &wrong).is_err());
    }

    #[test]
    fn hook_is_neutral_at_init() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 2);
        let s = PromptSet::new(&ps.pp("capm_unet"), &[0, 1], &[8, 16], &cfg(3, 4)).unwrap();
        let z = crate::rng::gaussian(&mut crate::rng::seeded(3), (1, 8, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let y = s.apply(HookSite::Level(0), &z, None).unwrap();
        assert_eq!(vals(&y), vals(&z));
    }

    #[test]
    fn levels_have_independent_parameters() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 2);
        let s = PromptSet::new(&ps.pp("capm_unet"), &[0, 1], &[8, 8], &cfg(3, 4)).unwrap();
        let before = vals(s.banks[&1].components.as_tensor());
        set(&s.banks[&0].components, vec![1.0; 3 * 8 * 16]);
        assert_eq!(vals(s.banks[&1].components.as_tensor()), before);
    }

    #[test]
    fn unknown_level_is_a_config_error() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 2);
        assert!(PromptSet::new(&ps, &[3], &[8, 8], &cfg(3, 4)).is_err());
    }
}
