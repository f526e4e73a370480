//! Pipeline configuration: one TOML file covering every module, training
//! recipe and inference switch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capm::CapmConfig;
use crate::dataset::SyntheticDatasetSpec;
use crate::dcm::DcmConfig;
use crate::degrade::DegradationSpec;
use crate::diffusion::{BetaSpacing, NoiseSchedule, SamplerMode};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::guidance::GuidanceConfig;
use crate::recon::{FusionConfig, StamConfig};
use crate::unet::UnetConfig;
use crate::vae::VaeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub sampler: SamplerMode,
    pub sampling_steps: usize,
    /// Bound on the denoised estimate; `None` disables clipping.
    pub x0_clip: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps_total: 1000,
            beta_start: 0.00085,
            beta_end: 0.0120,
            spacing: BetaSpacing::Linear,
            sampler: SamplerMode::Ddim,
            sampling_steps: 50,
            x0_clip: Some(crate::diffusion::DEFAULT_X0_CLIP),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = NoiseSchedule::new(self.steps_total, self.beta_start, self.beta_end, self.spacing)?;
        s.x0_clip = self.x0_clip;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorConfig {
    pub enabled: bool,
}

impl Default for ColorConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

/// Independent inference switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variants {
    pub enable_dcm: bool,
    pub enable_capm: bool,
    pub enable_stam: bool,
    pub enable_guidance: bool,
    pub enable_color_correct: bool,
}

impl Default for Variants {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Variants {
    pub fn all(on: bool) -> Self {
        Self {
            enable_dcm: on,
            enable_capm: on,
            enable_stam: on,
            enable_guidance: on,
            enable_color_correct: on,
        }
    }

    /// Every subset of the five switches, all-off first.
    pub fn matrix() -> Vec<Self> {
        (0..32u8)
            .map(|m| Self {
                enable_dcm: m & 1 != 0,
                enable_capm: m & 2 != 0,
                enable_stam: m & 4 != 0,
                enable_guidance: m & 8 != 0,
                enable_color_correct: m & 16 != 0,
            })
            .collect()
    }

    /// Short label such as `dcm+capm` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.enable_dcm, "dcm"),
            (self.enable_capm, "capm"),
            (self.enable_stam, "stam"),
            (self.enable_guidance, "guidance"),
            (self.enable_color_correct, "color"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

/// Full-resolution frame sides must be multiples of this: the autoencoder
/// and the denoiser each halve the resolution twice.
pub const SIDE_UNIT: usize = crate::vae::LATENT_FACTOR * 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_clips: usize,
    pub vae_steps: usize,
    pub unet_steps: usize,
    pub joint_steps: usize,
    pub lr_vae: f64,
    pub lr_unet: f64,
    pub lr_dcm: f64,
    pub lr_joint: f64,
    pub kl_weight: f64,
    /// Training quality is drawn uniformly from this inclusive range.
    pub quality_min: u32,
    pub quality_max: u32,
    pub weight_diffusion: f64,
    pub weight_decoder: f64,
    pub weight_dcm: f64,
    /// Pass the diffusion loss back into the distortion-control network.
    pub joint_dcm_gradients: bool,
    /// Pooled standard deviation of the normalised latents.
    pub latent_std: f64,
    /// Gain applied to the random guidance half of the control input conv.
    pub control_guidance_gain: f64,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_clips: 4,
            vae_steps: 600,
            unet_steps: 1500,
            joint_steps: 600,
            lr_vae: 2e-3,
            lr_unet: 1e-3,
            lr_dcm: 1e-3,
            lr_joint: 3e-4,
            kl_weight: 1e-6,
            quality_min: 10,
            quality_max: 40,
            weight_diffusion: 1.0,
            weight_decoder: 1.0,
            weight_dcm: 1.0,
            joint_dcm_gradients: true,
            latent_std: 0.5,
            control_guidance_gain: 0.1,
            checkpoint_every: 200,
            out_dir: PathBuf::from("runs/toy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub degradation: DegradationSpec,
    pub vae: VaeConfig,
    pub unet: UnetConfig,
    pub dcm: DcmConfig,
    pub capm: CapmConfig,
    pub stam: StamConfig,
    pub fusion: FusionConfig,
    pub guidance: GuidanceConfig,
    pub flow: FlowParams,
    pub color_correct: ColorConfig,
    pub variants: Variants,
    pub train: TrainConfig,
    pub dataset: SyntheticDatasetSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            degradation: DegradationSpec::default(),
            vae: VaeConfig::default(),
            unet: UnetConfig::default(),
            dcm: DcmConfig::default(),
            capm: CapmConfig::default(),
            stam: StamConfig::default(),
            fusion: FusionConfig::default(),
            guidance: GuidanceConfig::default(),
            flow: FlowParams::default(),
            color_correct: ColorConfig::default(),
            variants: Variants::default(),
            train: TrainConfig::default(),
            dataset: SyntheticDatasetSpec::default(),
        }
    }
}

/// The parts of the configuration that determine parameter shapes and the
/// meaning of trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub vae: VaeConfig,
    pub unet: UnetConfig,
    pub dcm: DcmConfig,
    pub capm: CapmConfig,
    pub stam: StamConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.degradation.validate()?;
        self.dcm.validate()?;
        self.fusion.validate()?;
        if self.schedule.sampling_steps == 0 || self.schedule.sampling_steps > self.schedule.steps_total {
            return Err(Error::Param {
                name: "sampling_steps",
                reason: format!("must be in [1, {}]", self.schedule.steps_total),
            });
        }
        if self.vae.latent_channels != self.unet.latent_channels {
            return Err(Error::Config(format!(
                "vae.latent_channels {} differs from unet.latent_channels {}",
                self.vae.latent_channels, self.unet.latent_channels
            )));
        }
        if self.dcm.upscale != self.degradation.scale {
            return Err(Error::Config(format!(
                "dcm.upscale {} differs from degradation.scale {}",
                self.dcm.upscale, self.degradation.scale
            )));
        }
        if self.train.quality_min > self.train.quality_max || self.train.quality_max > 51 {
            return Err(Error::Param {
                name: "train.quality_max",
                reason: "quality range must satisfy min <= max <= 51".into(),
            });
        }
        self.dataset.validate()?;
        let unit = SIDE_UNIT;
        let scale = self.degradation.scale.max(1);
        for side in [self.dataset.height, self.dataset.width] {
            if side % unit != 0 || side % scale != 0 {
                return Err(Error::Param {
                    name: "dataset.height",
                    reason: format!("frame sides must be multiples of {unit} and of the degradation scale"),
                });
            }
        }
        Ok(())
    }

    /// Smallest valid network sizes, for smoke runs and tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.unet.widths = [8, 16, 16];
        cfg.unet.blocks_per_stage = 1;
        cfg.unet.time_dim = 16;
        cfg.vae.channels = [8, 8, 16];
        cfg.dcm.blocks = 1;
        cfg.dcm.channels = 8;
        cfg.dcm.window = 4;
        cfg.capm.k = 2;
        cfg.capm.prompt_hw = 4;
        cfg.schedule.sampling_steps = 4;
        cfg.train.batch_clips = 1;
        cfg.dataset.num_clips = 2;
        cfg.dataset.test_clips = 1;
        cfg.dataset.frames_per_clip = 2;
        cfg.dataset.height = 16;
        cfg.dataset.width = 16;
        cfg
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            schedule_steps: self.schedule.steps_total,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            spacing: self.schedule.spacing,
            vae: self.vae.clone(),
            unet: self.unet.clone(),
            dcm: self.dcm.clone(),
            capm: self.capm.clone(),
            stam: self.stam.clone(),
        }
    }

    /// Hash of the whole configuration.
    pub fn hash(&self) -> String {
        canonical_hash(&serde_json::to_value(self).expect("config serialises"))
    }
}

impl ModelConfig {
    pub fn hash(&self) -> String {
        canonical_hash(&self.to_value())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("model config serialises")
    }
}

/// SHA-256 over JSON with object keys in sorted order, so key order in the
/// source file never changes the hash.
pub fn canonical_hash(v: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(&sort_keys(v)).expect("value serialises");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn sort_keys(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => {
            let sorted: BTreeMap<_, _> = m.iter().map(|(k, v)| (k.clone(), sort_keys(v))).collect();
            serde_json::Value::Object(sorted.into_iter().collect())
        }
        serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}

/// Dotted paths whose values differ between two JSON documents.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match (ma.get(k), mb.get(k)) {
                        (Some(x), Some(y)) => walk(&p, x, y, out),
                        (x, y) => out.push(format!("{p}: {} -> {}", show(x), show(y))),
                    }
                }
            }
            _ if a != b => out.push(format!("{prefix}: {a} -> {b}")),
            _ => {}
        }
    }
    fn show(v: Option<&serde_json::Value>) -> String {
        v.map_or("<absent>".into(), |v| v.to_string())
    }
    let mut out = Vec::new();
    walk("", a, b, &mut out);
    out
}
