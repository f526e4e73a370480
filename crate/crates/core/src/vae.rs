//! Toy variational autoencoder with a /4 latent and a hookable decoder.
//!
//! The decoder exposes four kinds of interception points so that prompt
//! injection, temporal attention, and encoder-feature fusion can attach
//! without the VAE knowing about them.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{upsample2, Conv2d, GroupNorm, Init, ParamStore, ResBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    /// Feature widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub latent_channels: usize,
    pub image_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            latent_channels: 4,
            image_channels: 3,
        }
    }
}

/// Spatial downsampling between pixels and latents.
pub const LATENT_FACTOR: usize = 4;

/// Where a decoder hook is being called.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookSite {
    /// Decoder level `i`; level 0 is the latent resolution, level 1 is ×2.
    Level(usize),
    /// Between the two spatial residual blocks of the temporal stage.
    Temporal,
    /// Full-resolution decoder features, just before the output head.
    Fusion,
}

/// Multi-scale features of the encoder at full, half and quarter resolution.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub levels: Vec<Tensor>,
}

/// A decoder-stage callback. Must return a tensor of the input's shape.
pub trait DecoderHook {
    fn apply(&self, site: HookSite, x: &Tensor, enc: Option<&EncoderFeatures>) -> Result<Tensor>;
}

/// Hook that returns its input unchanged.
pub struct IdentityHook;

impl DecoderHook for IdentityHook {
    fn apply(&self, _site: HookSite, x: &Tensor, _enc: Option<&EncoderFeatures>) -> Result<Tensor> {
        Ok(x.clone())
    }
}

pub(crate) fn run_hooks(
    hooks: &[&dyn DecoderHook],
    site: HookSite,
    x: Tensor,
    enc: Option<&EncoderFeatures>,
) -> Result<Tensor> {
    let mut x = x;
    for hook in hooks {
        let y = hook.apply(site, &x, enc)?;
        if y.dims() != x.dims() {
            return Err(Error::Config(format!(
                "hook at {site:?} changed shape {:?} -> {:?}",
                x.dims(),
                y.dims()
            )));
        }
        x = y;
    }
    Ok(x)
}

pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Posterior {
    /// KL divergence to the unit Gaussian, averaged over elements.
    pub fn kl(&self) -> Result<Tensor> {
        let var = self.logvar.exp()?;
        let t = ((self.mean.sqr()? + var)? - &self.logvar)?;
        Ok(((t - 1.0)? * 0.5)?.mean_all()?)
    }
}

struct Encoder {
    conv_in: Conv2d,
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    res2: ResBlock,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(ps: &ParamStore, cfg: &VaeConfig) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        Ok(Self {
            conv_in: Conv2d::new(&ps.pp("conv_in"), cfg.image_channels, c0, 3, 1)?,
            res0: ResBlock::new(&ps.pp("res0"), c0, c0, None)?,
            down0: Conv2d::new(&ps.pp("down0"), c0, c1, 3, 2)?,
            res1: ResBlock::new(&ps.pp("res1"), c1, c1, None)?,
            down1: Conv2d::new(&ps.pp("down1"), c1, c2, 3, 2)?,
            res2: ResBlock::new(&ps.pp("res2"), c2, c2, None)?,
            mid: ResBlock::new(&ps.pp("mid"), c2, c2, None)?,
            norm_out: GroupNorm::new(&ps.pp("norm_out"), c2)?,
            conv_out: Conv2d::new(&ps.pp("conv_out"), c2, 2 * cfg.latent_channels, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Posterior, EncoderFeatures)> {
        let f0 = self.res0.forward(&self.conv_in.forward(x)?, None)?;
        let f1 = self.res1.forward(&self.down0.forward(&f0)?, None)?;
        let f2 = self.res2.forward(&self.down1.forward(&f1)?, None)?;
        let h = self.mid.forward(&f2, None)?;
        let moments = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let d = moments.dim(1)? / 2;
        let mean = moments.narrow(1, 0, d)?;
        let logvar = moments.narrow(1, d, d)?.clamp(-20.0, 10.0)?;
        Ok((Posterior { mean, logvar }, EncoderFeatures { levels: vec![f0, f1, f2] }))
    }
}

struct Decoder {
    conv_in: Conv2d,
    res_in: ResBlock,
    up1: Conv2d,
    // Spatial stage wrapped by the temporal hook; registered under its own
    // group so it can stay frozen while temporal modules train.
    conv_h: Conv2d,
    res_a: ResBlock,
    res_b: ResBlock,
    up0: Conv2d,
    res_out: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(ps: &ParamStore, spatial: &ParamStore, cfg: &VaeConfig) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        Ok(Self {
            conv_in: Conv2d::new(&ps.pp("conv_in"), cfg.latent_channels, c2, 3, 1)?,
            res_in: ResBlock::new(&ps.pp("res_in"), c2, c2, None)?,
            up1: Conv2d::new(&ps.pp("up1"), c2, c1, 3, 1)?,
            conv_h: Conv2d::new(&spatial.pp("conv_h"), c1, c1, 3, 1)?,
            res_a: ResBlock::new(&spatial.pp("res_a"), c1, c1, None)?,
            res_b: ResBlock::new(&spatial.pp("res_b"), c1, c1, None)?,
            up0: Conv2d::new(&ps.pp("up0"), c1, c0, 3, 1)?,
            res_out: ResBlock::new(&ps.pp("res_out"), c0, c0, None)?,
            norm_out: GroupNorm::new(&ps.pp("norm_out"), c0)?,
            conv_out: Conv2d::new(&ps.pp("conv_out"), c0, cfg.image_channels, 3, 1)?,
        })
    }
}

/// Per-channel shift and global scale mapping raw posterior means to the
/// diffusion latent space.
struct LatentNorm {
    shift: candle_core::Var,
    scale: candle_core::Var,
}

pub struct Vae {
    pub cfg: VaeConfig,
    encoder: Encoder,
    decoder: Decoder,
    norm: LatentNorm,
}

impl Vae {
    /// Registers groups `vae_enc`, `vae_dec`, `vae_dec_spatial` and `vae_stats`.
    pub fn new(ps: &ParamStore, cfg: &VaeConfig) -> Result<Self> {
        let d = cfg.latent_channels;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(&ps.pp("vae_enc"), cfg)?,
            decoder: Decoder::new(&ps.pp("vae_dec"), &ps.pp("vae_dec_spatial"), cfg)?,
            norm: LatentNorm {
                shift: ps.pp("vae_stats").get(d, "shift", Init::Zeros)?,
                scale: ps.pp("vae_stats").get(1, "scale", Init::Ones)?,
            },
        })
    }

    fn check_pixels(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.image_channels {
            return Err(contract(format!("expected {} image channels, got {c}", self.cfg.image_channels)));
        }
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return Err(contract(format!(
                "image {h}x{w} is not divisible by {LATENT_FACTOR}; pad by {} rows and {} columns",
                (LATENT_FACTOR - h % LATENT_FACTOR) % LATENT_FACTOR,
                (LATENT_FACTOR - w % LATENT_FACTOR) % LATENT_FACTOR
            )));
        }
        Ok(())
    }

    /// Raw posterior and encoder features for `N×C×H×W` images in [0,1].
    pub fn encode_posterior(&self, x: &Tensor) -> Result<(Posterior, EncoderFeatures)> {
        self.check_pixels(x)?;
        self.encoder.forward(&((x * 2.0)? - 1.0)?)
    }

    /// Deterministic (posterior-mean) normalised latent.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_with_features(x)?.0)
    }

    pub fn encode_with_features(&self, x: &Tensor) -> Result<(Tensor, EncoderFeatures)> {
        let (post, feats) = self.encode_posterior(x)?;
        Ok((self.normalize(&post.mean)?, feats))
    }

    pub fn normalize(&self, raw: &Tensor) -> Result<Tensor> {
        let d = self.cfg.latent_channels;
        let shift = self.norm.shift.reshape((1, d, 1, 1))?;
        Ok(raw.broadcast_sub(&shift)?.broadcast_mul(&self.norm.scale.reshape((1, 1, 1, 1))?)?)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.cfg.latent_channels;
        let shift = self.norm.shift.reshape((1, d, 1, 1))?;
        Ok(z.broadcast_div(&self.norm.scale.reshape((1, 1, 1, 1))?)?.broadcast_add(&shift)?)
    }

    /// Fits the latent normalisation so each channel has zero mean and the
    /// pooled standard deviation equals `target_std`.
    pub fn fit_latent_norm(&self, raw_means: &Tensor, target_std: f64) -> Result<()> {
        let d = self.cfg.latent_channels;
        let per_channel = raw_means.transpose(0, 1)?.reshape((d, ()))?.to_dtype(DType::F64)?;
        let mean = per_channel.mean_keepdim(1)?;
        let var = per_channel.broadcast_sub(&mean)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
        let scale = target_std / var.sqrt().max(1e-8);
        let dtype = self.norm.shift.dtype();
        self.norm.shift.set(&mean.flatten_all()?.to_dtype(dtype)?)?;
        self.norm.scale.set(&Tensor::new(&[scale], raw_means.device())?.to_dtype(dtype)?)?;
        Ok(())
    }

    /// Decoder output before clamping (used by training losses).
    pub fn decode_raw(&self, z: &Tensor, enc: Option<&EncoderFeatures>, hooks: &[&dyn DecoderHook]) -> Result<Tensor> {
        let (_, d, _, _) = z.dims4()?;
        if d != self.cfg.latent_channels {
            return Err(contract(format!("expected {} latent channels, got {d}", self.cfg.latent_channels)));
        }
        let dec = &self.decoder;
        let z = self.denormalize(z)?;
        let h = dec.res_in.forward(&dec.conv_in.forward(&z)?, None)?;
        let h = run_hooks(hooks, HookSite::Level(0), h, enc)?;
        let h = dec.up1.forward(&upsample2(&h)?)?;
        let h = run_hooks(hooks, HookSite::Level(1), h, enc)?;
        let h = dec.res_a.forward(&dec.conv_h.forward(&h)?, None)?;
        let h = run_hooks(hooks, HookSite::Temporal, h, enc)?;
        let h = dec.res_b.forward(&h, None)?;
        let h = dec.res_out.forward(&dec.up0.forward(&upsample2(&h)?)?, None)?;
        let h = run_hooks(hooks, HookSite::Fusion, h, enc)?;
        let out = dec.conv_out.forward(&dec.norm_out.forward(&h)?.silu()?)?;
        Ok(((out + 1.0)? * 0.5)?)
    }

    /// The frozen spatial stage `res_b(hook(res_a(conv_h(z))))` on its own.
    pub fn spatial_stage(&self, z: &Tensor, hooks: &[&dyn DecoderHook]) -> Result<Tensor> {
        let dec = &self.decoder;
        let h = dec.res_a.forward(&dec.conv_h.forward(z)?, None)?;
        let h = run_hooks(hooks, HookSite::Temporal, h, None)?;
        dec.res_b.forward(&h, None)
    }

    /// Images in [0,1] from normalised latents `N×d×h×w`.
    pub fn decode(&self, z: &Tensor, enc: Option<&EncoderFeatures>, hooks: &[&dyn DecoderHook]) -> Result<Tensor> {
        Ok(self.decode_raw(z, enc, hooks)?.clamp(0.0, 1.0)?)
    }

    /// Number of decoder levels that can host a prompt bank, with their widths.
    pub fn level_widths(&self) -> [usize; 2] {
        [self.cfg.channels[2], self.cfg.channels[1]]
    }

    /// Width of the temporal stage features.
    pub fn temporal_width(&self) -> usize {
        self.cfg.channels[1]
    }

    /// Width of the full-resolution encoder/decoder features.
    pub fn fusion_width(&self) -> usize {
        self.cfg.channels[0]
    }
}
