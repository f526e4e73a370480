//! All networks of the pipeline registered in one parameter store.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};

use crate::capm::PromptSet;
use crate::config::{ModelConfig, PipelineConfig};
use crate::dcm::Dcm;
use crate::diffusion::NoiseSchedule;
use crate::error::{contract, Result};
use crate::nn::ParamStore;
use crate::recon::{Cfw, CfwHook, Stam};
use crate::unet::{ControlBranch, ControlFeatures, Unet};
use crate::vae::{DecoderHook, EncoderFeatures, Vae};

/// Training stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Vae,
    Unet,
    Dcm,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Vae, Stage::Unet, Stage::Dcm, Stage::Joint];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Unet => "unet",
            Stage::Dcm => "dcm",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Parameter groups updated by this stage; everything else is frozen.
    pub fn trainable_groups(&self) -> BTreeSet<String> {
        let names: &[&str] = match self {
            Stage::Vae => &["vae_enc", "vae_dec", "vae_dec_spatial"],
            Stage::Unet => &["unet_enc", "unet_dec"],
            Stage::Dcm => &["dcm"],
            Stage::Joint => &["unet_dec", "vae_dec", "control", "dcm", "capm_unet", "capm_vae", "stam", "cfw"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

/// Bumped whenever a module's parameter layout changes.
pub const MODULE_VERSIONS: &[(&str, u32)] = &[
    ("vae", 1),
    ("unet", 1),
    ("control", 1),
    ("dcm", 1),
    ("capm", 1),
    ("stam", 1),
    ("cfw", 1),
];

pub struct Model {
    pub ps: ParamStore,
    pub cfg: ModelConfig,
    pub schedule: NoiseSchedule,
    pub vae: Vae,
    pub unet: Unet,
    pub control: ControlBranch,
    pub dcm: Dcm,
    pub capm_unet: PromptSet,
    pub capm_vae: PromptSet,
    pub stam: Stam,
    pub cfw: Cfw,
}

impl Model {
    /// Freshly initialised model; `seed` drives every initialiser.
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        Self::with_device(cfg, seed, DType::F32, Device::Cpu)
    }

    pub fn with_device(cfg: &PipelineConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        let ps = ParamStore::new(dtype, device, seed);
        let vae = Vae::new(&ps, &cfg.vae)?;
        let unet = Unet::new(&ps, &cfg.unet)?;
        let control = ControlBranch::new(&ps, &cfg.unet)?;
        let dcm = Dcm::new(&ps, &cfg.dcm, cfg.vae.image_channels)?;
        let capm_unet = PromptSet::new(&ps.pp("capm_unet"), &cfg.capm.levels, &cfg.unet.widths, &cfg.capm)?;
        let capm_vae = PromptSet::new(&ps.pp("capm_vae"), &cfg.capm.vae_levels, &vae.level_widths(), &cfg.capm)?;
        let stam = Stam::new(&ps, vae.temporal_width(), &cfg.stam)?;
        let cfw = Cfw::new(&ps, vae.fusion_width())?;
        Ok(Self {
            cfg: cfg.model_config(),
            schedule: cfg.schedule.build()?,
            ps,
            vae,
            unet,
            control,
            dcm,
            capm_unet,
            capm_vae,
            stam,
            cfw,
        })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn device(&self) -> Device {
        self.ps.device()
    }

    /// Control residuals for noisy latents given encoded guidance latents.
    pub fn control_features(&self, z_t: &Tensor, c_hr: &Tensor, ts: &[usize]) -> Result<ControlFeatures> {
        let temb = self.unet.time_embedding(ts, z_t.dim(0)?, z_t.dtype(), z_t.device())?;
        self.control.forward(z_t, c_hr, &temb)
    }

    /// Noise prediction with optional control and prompt injection.
    pub fn predict_noise(&self, z_t: &Tensor, ts: &[usize], c_hr: Option<&Tensor>, capm: bool) -> Result<Tensor> {
        let ctrl = match c_hr {
            Some(c) => Some(self.control_features(z_t, c, ts)?),
            None => None,
        };
        let hooks: Vec<&dyn DecoderHook> = if capm { vec![&self.capm_unet] } else { vec![] };
        self.unet.predict(z_t, ts, ctrl.as_ref(), &hooks)
    }

    /// Decoder with the selected reconstruction modules, before clamping.
    pub fn decode_full_raw(
        &self,
        z: &Tensor,
        enc: Option<&EncoderFeatures>,
        capm: bool,
        stam: bool,
        omega: Option<f64>,
    ) -> Result<Tensor> {
        let cfw_hook = omega.map(|omega| CfwHook { cfw: &self.cfw, omega });
        let mut hooks: Vec<&dyn DecoderHook> = Vec::new();
        if capm {
            hooks.push(&self.capm_vae);
        }
        if stam {
            hooks.push(&self.stam);
        }
        if let Some(h) = &cfw_hook {
            if enc.is_none() {
                return Err(contract("feature fusion requested without encoder features"));
            }
            hooks.push(h);
        }
        self.vae.decode_raw(z, enc, &hooks)
    }

    pub fn decode_full(
        &self,
        z: &Tensor,
        enc: Option<&EncoderFeatures>,
        capm: bool,
        stam: bool,
        omega: Option<f64>,
    ) -> Result<Tensor> {
        Ok(self.decode_full_raw(z, enc, capm, stam, omega)?.clamp(0.0, 1.0)?)
    }

    /// Trainable vars for a stage, sorted by name.
    pub fn stage_params(&self, stage: Stage) -> Vec<(String, candle_core::Var)> {
        self.ps.in_groups(&stage.trainable_groups())
    }

    /// Prepares the joint stage: the control branch starts as a copy of the
    /// trained base encoder.
    pub fn init_control_from_base(&self, guidance_gain: f64) -> Result<()> {
        self.control.copy_from_base(&self.ps, guidance_gain)
    }

    pub fn param_count(&self) -> usize {
        self.ps.all().values().map(|v| v.elem_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};

    fn tiny_config() -> PipelineConfig {
        PipelineConfig::tiny()
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn every_group_is_registered() {
        let m = Model::new(&tiny_config(), 0).unwrap();
        let groups: Vec<String> = m.ps.groups().into_iter().collect();
        assert_eq!(
            groups,
            vec![
                "capm_unet", "capm_vae", "cfw", "control", "dcm", "stam", "unet_dec", "unet_enc", "vae_dec",
                "vae_dec_spatial", "vae_enc", "vae_stats"
            ]
        );
    }

    #[test]
    fn joint_stage_freezes_base_encoders_and_spatial_blocks() {
        let g = Stage::Joint.trainable_groups();
        for frozen in ["unet_enc", "vae_enc", "vae_dec_spatial", "vae_stats"] {
            assert!(!g.contains(frozen));
        }
    }

    #[test]
    fn fresh_model_additions_are_neutral() {
        let m = Model::new(&tiny_config(), 1).unwrap();
        let dev = Device::Cpu;
        let z = gaussian(&mut seeded(2), (2, 4, 4, 4), DType::F32, &dev).unwrap();
        let c = gaussian(&mut seeded(3), (2, 4, 4, 4), DType::F32, &dev).unwrap();
        let base = m.predict_noise(&z, &[500], None, false).unwrap();
        let full = m.predict_noise(&z, &[500], Some(&c), true).unwrap();
        assert_eq!(vals(&base), vals(&full));
        let img = m.decode_full(&z, None, false, false, None).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let (_, enc) = m.vae.encode_with_features(&x).unwrap();
        let img_full = m.decode_full(&z, Some(&enc), true, true, Some(0.75)).unwrap();
        assert_eq!(vals(&img), vals(&img_full));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert_eq!(Stage::parse("nope"), None);
    }
}
