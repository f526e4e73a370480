//! Noise-prediction UNet over latents, and its control branch: a trainable
//! copy of the encoder whose features enter the UNet through zero-initialised
//! 1×1 projections.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{timestep_embedding, upsample2, Conv2d, GroupNorm, Init, Linear, ParamStore, ResBlock, SpatialAttention};
use crate::vae::{run_hooks, DecoderHook, HookSite, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    pub time_dim: usize,
    pub latent_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            blocks_per_stage: 2,
            time_dim: 128,
            latent_channels: 4,
        }
    }
}

pub const LEVELS: usize = 3;

/// Encoder half shared by the base UNet and the control branch.
struct EncoderStack {
    conv_in: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    low_attn: SpatialAttention,
    downs: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: SpatialAttention,
    mid2: ResBlock,
}

impl EncoderStack {
    fn new(ps: &ParamStore, cfg: &UnetConfig, cin: usize, conv_in_init: Init) -> Result<Self> {
        let w = cfg.widths;
        let conv_in = Conv2d::with_init(&ps.pp("conv_in"), cin, w[0], 3, 1, conv_in_init, Init::Zeros)?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        let mut cur = w[0];
        for (i, &width) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(&ps.pp(format!("stage{i}.res{b}")), cur, width, Some(cfg.time_dim))?);
                cur = width;
            }
            stages.push(blocks);
            if i + 1 < LEVELS {
                downs.push(Conv2d::new(&ps.pp(format!("down{i}")), width, width, 3, 2)?);
            }
        }
        Ok(Self {
            conv_in,
            stages,
            low_attn: SpatialAttention::new(&ps.pp("stage2.attn"), w[2])?,
            downs,
            mid1: ResBlock::new(&ps.pp("mid1"), w[2], w[2], Some(cfg.time_dim))?,
            mid_attn: SpatialAttention::new(&ps.pp("mid_attn"), w[2])?,
            mid2: ResBlock::new(&ps.pp("mid2"), w[2], w[2], Some(cfg.time_dim))?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for (i, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h, Some(temb))?;
            }
            if i == LEVELS - 1 {
                h = self.low_attn.forward(&h)?;
            }
            skips.push(h.clone());
            if let Some(down) = self.downs.get(i) {
                h = down.forward(&h)?;
            }
        }
        let h = self.mid1.forward(&h, Some(temb))?;
        let h = self.mid_attn.forward(&h)?;
        let mid = self.mid2.forward(&h, Some(temb))?;
        Ok((skips, mid))
    }
}

/// Residuals added to the UNet skips (one per level) and the mid block.
#[derive(Debug, Clone)]
pub struct ControlFeatures {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
}

impl ControlFeatures {
    /// Spatial size of each skip residual, finest first.
    pub fn scales(&self) -> Vec<(usize, usize)> {
        self.skips.iter().map(|s| (s.dim(2).unwrap_or(0), s.dim(3).unwrap_or(0))).collect()
    }
}

struct TimeMlp {
    lin1: Linear,
    lin2: Linear,
    base_dim: usize,
}

pub struct Unet {
    pub cfg: UnetConfig,
    time: TimeMlp,
    encoder: EncoderStack,
    dec_stages: Vec<Vec<ResBlock>>,
    dec_attn: SpatialAttention,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Unet {
    /// Registers groups `unet_enc` (time MLP, encoder, mid) and `unet_dec`.
    pub fn new(ps: &ParamStore, cfg: &UnetConfig) -> Result<Self> {
        let enc = ps.pp("unet_enc");
        let dec = ps.pp("unet_dec");
        let w = cfg.widths;
        let base_dim = w[0];
        let time = TimeMlp {
            lin1: Linear::new(&enc.pp("time.lin1"), base_dim, cfg.time_dim)?,
            lin2: Linear::new(&enc.pp("time.lin2"), cfg.time_dim, cfg.time_dim)?,
            base_dim,
        };
        let encoder = EncoderStack::new(&enc, cfg, cfg.latent_channels, Init::FanIn(1.0))?;
        let mut dec_stages = vec![Vec::new(); LEVELS];
        let mut ups = Vec::new();
        let mut cur = w[2];
        for i in (0..LEVELS).rev() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let cin = if b == 0 { cur + w[i] } else { w[i] };
                blocks.push(ResBlock::new(&dec.pp(format!("stage{i}.res{b}")), cin, w[i], Some(cfg.time_dim))?);
            }
            cur = w[i];
            dec_stages[i] = blocks;
        }
        for (i, &width) in w.iter().enumerate().skip(1) {
            ups.push(Conv2d::new(&dec.pp(format!("up{i}")), width, width, 3, 1)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            time,
            encoder,
            dec_stages,
            dec_attn: SpatialAttention::new(&dec.pp("stage2.attn"), w[2])?,
            ups,
            norm_out: GroupNorm::new(&dec.pp("norm_out"), w[0])?,
            conv_out: Conv2d::new(&dec.pp("conv_out"), w[0], cfg.latent_channels, 3, 1)?,
        })
    }

    /// Embedding of one timestep per batch element (`ts.len()` is 1 or N).
    pub fn time_embedding(&self, ts: &[usize], n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let ts: Vec<usize> = match ts.len() {
            1 => vec![ts[0]; n],
            len if len == n => ts.to_vec(),
            len => return Err(contract(format!("{len} timesteps for a batch of {n}"))),
        };
        let e = timestep_embedding(&ts, self.time.base_dim, dtype, device)?;
        let e = self.time.lin1.forward(&e)?.silu()?;
        self.time.lin2.forward(&e)
    }

    /// Predicted noise for `z_t: N×d×h×w`. `hooks` are called after each
    /// decoder level with `HookSite::Level(i)` (0 = finest).
    pub fn predict(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        control: Option<&ControlFeatures>,
        hooks: &[&dyn DecoderHook],
    ) -> Result<Tensor> {
        let (n, d, h, w) = z_t.dims4()?;
        if d != self.cfg.latent_channels {
            return Err(contract(format!("expected {} latent channels, got {d}", self.cfg.latent_channels)));
        }
        let div = 1 << (LEVELS - 1);
        if h % div != 0 || w % div != 0 {
            return Err(contract(format!("latent {h}x{w} must be divisible by {div}")));
        }
        let temb = self.time_embedding(ts, n, z_t.dtype(), z_t.device())?;
        self.predict_with_temb(z_t, &temb, control, hooks)
    }

    fn predict_with_temb(
        &self,
        z_t: &Tensor,
        temb: &Tensor,
        control: Option<&ControlFeatures>,
        hooks: &[&dyn DecoderHook],
    ) -> Result<Tensor> {
        let (mut skips, mut h) = self.encoder.forward(z_t, temb)?;
        if let Some(ctrl) = control {
            if ctrl.skips.len() != skips.len() {
                return Err(contract(format!("control has {} levels, UNet has {}", ctrl.skips.len(), skips.len())));
            }
            for (s, c) in skips.iter_mut().zip(&ctrl.skips) {
                if s.dims() != c.dims() {
                    return Err(contract(format!("control feature {:?} does not match skip {:?}", c.dims(), s.dims())));
                }
                *s = (&*s + c)?;
            }
            if ctrl.mid.dims() != h.dims() {
                return Err(contract(format!("control mid {:?} does not match {:?}", ctrl.mid.dims(), h.dims())));
            }
            h = (h + &ctrl.mid)?;
        }
        for i in (0..LEVELS).rev() {
            h = Tensor::cat(&[&h, &skips[i]], 1)?;
            for b in &self.dec_stages[i] {
                h = b.forward(&h, Some(temb))?;
            }
            if i == LEVELS - 1 {
                h = self.dec_attn.forward(&h)?;
            }
            h = run_hooks(hooks, HookSite::Level(i), h, None)?;
            if i > 0 {
                h = self.ups[i - 1].forward(&upsample2(&h)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Trainable encoder copy fed with `concat(Z_t, C_HR)`.
pub struct ControlBranch {
    encoder: EncoderStack,
    zero_skips: Vec<Conv2d>,
    zero_mid: Conv2d,
    latent_channels: usize,
}

impl ControlBranch {
    /// Registers group `control`.
    pub fn new(ps: &ParamStore, cfg: &UnetConfig) -> Result<Self> {
        let ps = ps.pp("control");
        let w = cfg.widths;
        let encoder = EncoderStack::new(&ps, cfg, 2 * cfg.latent_channels, Init::FanIn(1.0))?;
        let zero_skips = w
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::with_init(&ps.pp(format!("zero{i}")), c, c, 1, 1, Init::Zeros, Init::Zeros))
            .collect::<Result<Vec<_>>>()?;
        let zero_mid = Conv2d::with_init(&ps.pp("zero_mid"), w[2], w[2], 1, 1, Init::Zeros, Init::Zeros)?;
        Ok(Self {
            encoder,
            zero_skips,
            zero_mid,
            latent_channels: cfg.latent_channels,
        })
    }

    /// Copies the base encoder weights into the branch. The `Z_t` half of the
    /// input convolution is copied; the guidance half is scaled by
    /// `guidance_gain` from its random init.
    pub fn copy_from_base(&self, ps: &ParamStore, guidance_gain: f64) -> Result<()> {
        let all = ps.all();
        for (name, var) in all.range("control.".to_string()..) {
            let Some(rest) = name.strip_prefix("control.") else { break };
            if rest.starts_with("zero") {
                continue;
            }
            let Some(base) = all.get(&format!("unet_enc.{rest}")) else { continue };
            if rest == "conv_in.weight" {
                let d = self.latent_channels;
                let z_half = base.as_tensor().clone();
                let g_half = (var.as_tensor().narrow(1, d, d)? * guidance_gain)?;
                var.set(&Tensor::cat(&[&z_half, &g_half], 1)?)?;
            } else {
                var.set(base.as_tensor())?;
            }
        }
        Ok(())
    }

    /// Control residuals from noisy latent and guidance latent.
    pub fn forward(&self, z_t: &Tensor, c_hr: &Tensor, temb: &Tensor) -> Result<ControlFeatures> {
        if z_t.dims() != c_hr.dims() {
            return Err(contract(format!(
                "guidance latent {:?} does not match noisy latent {:?}",
                c_hr.dims(),
                z_t.dims()
            )));
        }
        let x = Tensor::cat(&[z_t, c_hr], 1)?;
        let (skips, mid) = self.encoder.forward(&x, temb)?;
        let skips = skips
            .iter()
            .zip(&self.zero_skips)
            .map(|(s, conv)| conv.forward(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlFeatures {
            skips,
            mid: self.zero_mid.forward(&mid)?,
        })
    }
}

/// Encodes the high-resolution guidance and runs the control branch.
pub fn control_encode(
    vae: &Vae,
    unet: &Unet,
    control: &ControlBranch,
    x_hr: &Tensor,
    z_t: &Tensor,
    ts: &[usize],
) -> Result<ControlFeatures> {
    let c_hr = vae.encode(x_hr)?;
    if c_hr.dims() != z_t.dims() {
        return Err(contract(format!(
            "guidance image {:?} encodes to {:?}, noisy latent is {:?}",
            x_hr.dims(),
            c_hr.dims(),
            z_t.dims()
        )));
    }
    let temb = unet.time_embedding(ts, z_t.dim(0)?, z_t.dtype(), z_t.device())?;
    control.forward(z_t, &c_hr, &temb)
}
