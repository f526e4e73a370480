//! Distortion control: a small residual window-attention network that
//! upsamples and cleans low-quality frames before they condition diffusion.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{l1_loss, softmax_last, Conv2d, Init, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcmConfig {
    pub blocks: usize,
    pub window: usize,
    pub channels: usize,
    pub upscale: usize,
    /// Attention layers per block; odd layers use shifted windows.
    pub layers_per_block: usize,
    pub mlp_ratio: usize,
    /// Standalone L1 warmup steps before joint training.
    pub pretrain_steps: usize,
}

impl Default for DcmConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            window: 8,
            channels: 32,
            upscale: 4,
            layers_per_block: 2,
            mlp_ratio: 2,
            pretrain_steps: 600,
        }
    }
}

impl DcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Param { name: "dcm.blocks", reason: "must be at least 1".into() });
        }
        if self.window == 0 {
            return Err(Error::Param { name: "dcm.window", reason: "must be at least 1".into() });
        }
        if self.upscale == 0 {
            return Err(Error::Param { name: "dcm.upscale", reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// Relative-position index of every (query, key) pair inside a window.
fn relative_index(w: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(w * w * w * w);
    for qi in 0..w * w {
        let (qy, qx) = (qi / w, qi % w);
        for ki in 0..w * w {
            let (ky, kx) = (ki / w, ki % w);
            let dy = qy + w - 1 - ky;
            let dx = qx + w - 1 - kx;
            idx.push((dy * (2 * w - 1) + dx) as u32);
        }
    }
    idx
}

/// Additive mask keeping shifted windows from attending across the seams
/// introduced by the cyclic roll. Shape `nW × w² × w²`.
fn shift_mask(h: usize, w: usize, win: usize, shift: usize) -> Vec<f32> {
    let region = |p: usize, n: usize| {
        if p < n - win {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / win, w / win);
    let mut mask = Vec::with_capacity(nh * nw * win.pow(4));
    for by in 0..nh {
        for bx in 0..nw {
            let labels: Vec<usize> = (0..win * win)
                .map(|i| {
                    let y = by * win + i / win;
                    let x = bx * win + i % win;
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for q in &labels {
                for k in &labels {
                    mask.push(if q == k { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

struct WindowLayer {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    bias_table: Var,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
}

impl WindowLayer {
    fn new(ps: &ParamStore, cfg: &DcmConfig, shifted: bool) -> Result<Self> {
        let c = cfg.channels;
        let w = cfg.window;
        Ok(Self {
            norm1: LayerNorm::new(&ps.pp("norm1"), c)?,
            qkv: Linear::new(&ps.pp("qkv"), c, 3 * c)?,
            proj: Linear::new(&ps.pp("proj"), c, c)?,
            bias_table: ps.get((2 * w - 1) * (2 * w - 1), "rel_bias", Init::Normal(0.02))?,
            norm2: LayerNorm::new(&ps.pp("norm2"), c)?,
            fc1: Linear::new(&ps.pp("fc1"), c, cfg.mlp_ratio * c)?,
            fc2: Linear::new(&ps.pp("fc2"), cfg.mlp_ratio * c, c)?,
            shifted,
        })
    }

    /// `x: B×H×W×C` with H, W multiples of the window.
    fn forward(&self, x: &Tensor, win: usize) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let shift = if self.shifted && (h > win || w > win) { win / 2 } else { 0 };
        let mut t = self.norm1.forward(x)?;
        if shift > 0 {
            t = t.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let (nh, nw) = (h / win, w / win);
        let windows = t
            .reshape((b, nh, win, nw, win, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b * nh * nw, win * win, c))?;
        let qkv = self.qkv.forward(&windows)?;
        let q = qkv.narrow(2, 0, c)?.contiguous()?;
        let k = qkv.narrow(2, c, c)?.contiguous()?;
        let v = qkv.narrow(2, 2 * c, c)?.contiguous()?;
        let n = win * win;
        let idx = Tensor::from_vec(relative_index(win), n * n, x.device())?;
        let bias = self.bias_table.index_select(&idx, 0)?.reshape((1, n, n))?;
        let mut scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?.broadcast_add(&bias)?;
        if shift > 0 {
            let mask = Tensor::from_vec(shift_mask(h, w, win, shift), (1, nh * nw, n, n), x.device())?.to_dtype(x.dtype())?;
            scores = scores.reshape((b, nh * nw, n, n))?.broadcast_add(&mask)?.reshape((b * nh * nw, n, n))?;
        }
        let out = self.proj.forward(&softmax_last(&scores)?.matmul(&v)?)?;
        let mut out = out
            .reshape((b, nh, nw, win, win, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, h, w, c))?;
        if shift > 0 {
            out = out.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        let x = (x + out)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + m)?)
    }
}

/// Residual block: `feat + scale · conv(layers(feat))`.
struct ResidualWindowBlock {
    layers: Vec<WindowLayer>,
    conv: Conv2d,
    scale: Var,
}

pub struct Dcm {
    pub cfg: DcmConfig,
    shallow: Conv2d,
    blocks: Vec<ResidualWindowBlock>,
    up: Conv2d,
}

impl Dcm {
    /// Registers group `dcm`.
    pub fn new(ps: &ParamStore, cfg: &DcmConfig, image_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let ps = ps.pp("dcm");
        let c = cfg.channels;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let bp = ps.pp(format!("block{i}"));
                Ok(ResidualWindowBlock {
                    layers: (0..cfg.layers_per_block)
                        .map(|l| WindowLayer::new(&bp.pp(format!("layer{l}")), cfg, l % 2 == 1))
                        .collect::<Result<Vec<_>>>()?,
                    conv: Conv2d::new(&bp.pp("conv"), c, c, 3, 1)?,
                    scale: bp.get(1, "scale", Init::Ones)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            shallow: Conv2d::new(&ps.pp("shallow"), image_channels, c, 3, 1)?,
            blocks,
            up: Conv2d::new(&ps.pp("up"), c, image_channels * cfg.upscale * cfg.upscale, 3, 1)?,
        })
    }

    /// Forces every block's residual scale (used to inspect the skip path).
    pub fn set_block_scales(&self, value: f64) -> Result<()> {
        for b in &self.blocks {
            b.scale.set(&Tensor::full(value, 1, b.scale.device())?.to_dtype(b.scale.dtype())?)?;
        }
        Ok(())
    }

    /// Upsampled frames before clamping, `N×C×(sH)×(sW)`.
    pub fn enhance_raw(&self, lq: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = lq.dims4()?;
        let win = self.cfg.window;
        let ph = h.div_ceil(win) * win - h;
        let pw = w.div_ceil(win) * win - w;
        let x = lq.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?;
        let x = ((x * 2.0)? - 1.0)?;
        let mut feat = self.shallow.forward(&x)?;
        for block in &self.blocks {
            let mut t = feat.permute((0, 2, 3, 1))?;
            for layer in &block.layers {
                t = layer.forward(&t, win)?;
            }
            let t = block.conv.forward(&t.permute((0, 3, 1, 2))?.contiguous()?)?;
            feat = (feat + t.broadcast_mul(&block.scale.reshape((1, 1, 1, 1))?)?)?;
        }
        let s = self.cfg.upscale;
        let out = candle_nn::ops::pixel_shuffle(&self.up.forward(&feat)?, s)?;
        let out = ((out + 1.0)? * 0.5)?;
        Ok(out.narrow(2, 0, h * s)?.narrow(3, 0, w * s)?)
    }

    /// Cleaned frames in [0,1] at `upscale×` resolution.
    pub fn enhance(&self, lq: &Tensor) -> Result<Tensor> {
        Ok(self.enhance_raw(lq)?.clamp(0.0, 1.0)?)
    }

    /// L1 between the enhanced low-quality batch and its high-resolution pair.
    pub fn loss(&self, lq: &Tensor, hr: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = lq.dims4()?;
        let s = self.cfg.upscale;
        if hr.dims() != [n, c, h * s, w * s] {
            return Err(contract(format!(
                "high-resolution batch {:?} does not pair with low-quality {:?} at ×{s}",
                hr.dims(),
                lq.dims()
            )));
        }
        l1_loss(&self.enhance_raw(lq)?, hr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tiny() -> DcmConfig {
        DcmConfig {
            blocks: 2,
            window: 4,
            channels: 8,
            upscale: 2,
            layers_per_block: 2,
            mlp_ratio: 2,
            pretrain_steps: 0,
        }
    }

    fn input(h: usize, w: usize) -> Tensor {
        let data: Vec<f32> = (0..3 * h * w).map(|i| ((i * 29 % 61) as f32) / 61.0).collect();
        Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn default_upscales_by_four() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let d = Dcm::new(&ps, &DcmConfig { blocks: 1, ..DcmConfig::default() }, 3).unwrap();
        let y = d.enhance(&input(16, 16)).unwrap();
        assert_eq!(y.dims(), &[1, 3, 64, 64]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn padding_is_transparent() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let cfg = DcmConfig { window: 8, ..tiny() };
        let d = Dcm::new(&ps, &cfg, 3).unwrap();
        let x = input(17, 17);
        let padded = x.pad_with_same(2, 0, 7).unwrap().pad_with_same(3, 0, 7).unwrap();
        let a = d.enhance(&x).unwrap();
        let b = d.enhance(&padded).unwrap().narrow(2, 0, 34).unwrap().narrow(3, 0, 34).unwrap();
        assert_eq!(a.dims(), &[1, 3, 34, 34]);
        let a = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_block_scales_leave_shallow_path() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let d = Dcm::new(&ps, &tiny(), 3).unwrap();
        d.set_block_scales(0.0).unwrap();
        let x = input(8, 8);
        let got = d.enhance(&x).unwrap();
        let feat = d.shallow.forward(&((&x * 2.0).unwrap() - 1.0).unwrap()).unwrap();
        let want = candle_nn::ops::pixel_shuffle(&d.up.forward(&feat).unwrap(), 2).unwrap();
        let want = ((want + 1.0).unwrap() * 0.5).unwrap().clamp(0.0, 1.0).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn shift_mask_blocks_seams_only() {
        let m = shift_mask(8, 8, 4, 2);
        // Top-left window never straddles a seam.
        assert!(m[..256].iter().all(|&v| v == 0.0));
        // Bottom-right window mixes three regions per axis.
        assert!(m[3 * 256..].iter().any(|&v| v < 0.0));
    }

    #[test]
    fn relative_index_is_symmetric_about_centre() {
        let idx = relative_index(3);
        assert_eq!(idx[0], 12); // same position → centre of 5×5 table
        assert_eq!(idx.len(), 81);
    }

    #[test]
    fn loss_is_zero_on_own_output_and_checks_pairing() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let d = Dcm::new(&ps, &tiny(), 3).unwrap();
        let x = input(8, 8);
        let hr = d.enhance_raw(&x).unwrap();
        assert_eq!(d.loss(&x, &hr).unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!(d.loss(&x, &input(8, 8)).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let d = Dcm::new(&ps, &tiny(), 3).unwrap();
        let x = input(4, 4).to_dtype(DType::F64).unwrap();
        let hr = Tensor::full(0.5f64, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let grads = d.loss(&x, &hr).unwrap().backward().unwrap();
        for name in ["dcm.block0.scale", "dcm.up.bias"] {
            let var = ps.var(name).unwrap();
            let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
            let base = var.as_tensor().copy().unwrap();
            let eval = |delta: f64| {
                let mut v = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                v[0] += delta;
                var.set(&Tensor::from_vec(v, base.shape(), &Device::Cpu).unwrap()).unwrap();
                d.loss(&x, &hr).unwrap().to_scalar::<f64>().unwrap()
            };
            let h = 1e-7;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&base).unwrap();
            assert!((fd - g).abs() <= 1e-4 * fd.abs().max(1e-6), "{name}: fd={fd} ad={g}");
        }
    }
}
