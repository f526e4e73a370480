//! Full inference: pre-cleaning, controlled latent sampling with flow
//! guidance, temporal decoding and color correction. Also the evaluation and
//! ablation drivers built on it.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{PipelineConfig, Variants, SIDE_UNIT};
use crate::dataset::{Dataset, Split};
use crate::degrade::degrade;
use crate::diffusion::{p_step, predict_x0, SamplerMode};
use crate::error::{contract, Result};
use crate::frame::{crop, frames_to_tensor, pad_to_multiple, tensor_to_frames, Frame, VideoClip};
use crate::guidance::{guide_latents, FlowPair, FlowRefresh, GuidanceConfig, GuidanceState};
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::recon::color_correct;
use crate::resize::{downsample_frame, resize_bicubic};
use crate::rng::{derive_seed, gaussian, seeded};
use crate::vae::LATENT_FACTOR;

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub model: Model,
}

/// Result of one inference call.
#[derive(Debug, Clone)]
pub struct Inference {
    pub sr: VideoClip,
    /// One entry per sampling step.
    pub guidance: Vec<GuidanceState>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Bicubic upscale of every frame to `scale×` its size, clamped to [0,1].
pub fn bicubic_upscale(clip: &VideoClip, scale: usize) -> Result<VideoClip> {
    let (h, w, _) = clip.dims();
    clip.map_frames(|f| Ok(resize_bicubic(f, h * scale, w * scale).mapv(|v| v.clamp(0.0, 1.0))))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, model: Model) -> Self {
        Self { cfg, model }
    }

    /// Builds the model from `cfg` and loads trained weights, refusing a
    /// checkpoint whose architecture differs from the configuration.
    pub fn from_checkpoint(cfg: PipelineConfig, path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let model = Model::new(&cfg, 0)?;
        ck.check_compatible(&model)?;
        ck.apply(&model)?;
        Ok(Self { cfg, model })
    }

    fn scale(&self) -> usize {
        self.cfg.degradation.scale
    }

    /// Guidance frames at output resolution: the pre-cleaner's output, or
    /// bicubic upscaling when it is switched off.
    fn guidance_frames(&self, lq: &Tensor, variants: Variants) -> Result<Tensor> {
        if variants.enable_dcm {
            return self.model.dcm.enhance(lq);
        }
        let frames = tensor_to_frames(lq)?;
        let up: Vec<Frame> = frames
            .iter()
            .map(|f| {
                let (h, w, _) = f.dim();
                resize_bicubic(f, h * self.scale(), w * self.scale()).mapv(|v| v.clamp(0.0, 1.0))
            })
            .collect();
        frames_to_tensor(&up, self.model.dtype(), &self.model.device())
    }

    fn flows_from_images(&self, images: &Tensor) -> Result<FlowPair> {
        let frames: Vec<Frame> = tensor_to_frames(images)?
            .iter()
            .map(|f| downsample_frame(&f.mapv(|v| v.clamp(0.0, 1.0)), LATENT_FACTOR))
            .collect();
        FlowPair::estimate(&frames, &self.cfg.flow)
    }

    /// Super-resolves `lq` with the given switches. `seed` fixes the initial
    /// latent noise (and the DDPM noise when that sampler is selected).
    pub fn run(&self, lq: &VideoClip, variants: Variants, seed: u64) -> Result<Inference> {
        let m = &self.model;
        let scale = self.scale();
        let (h, w, c) = lq.dims();
        if c != self.cfg.vae.image_channels {
            return Err(contract(format!("clip has {c} channels, model expects {}", self.cfg.vae.image_channels)));
        }
        let multiple = SIDE_UNIT / gcd(SIDE_UNIT, scale);
        let padded: Vec<Frame> = lq.frames.iter().map(|f| pad_to_multiple(f, multiple)).collect();
        let lq_t = frames_to_tensor(&padded, m.dtype(), &m.device())?;
        let n = padded.len();

        let guide = self.guidance_frames(&lq_t, variants)?;
        let (c_hr, feats) = m.vae.encode_with_features(&guide)?;

        let mut rng = seeded(seed);
        let mut z = gaussian(&mut rng, c_hr.shape(), m.dtype(), &m.device())?;
        let gcfg = GuidanceConfig {
            enabled: self.cfg.guidance.enabled && variants.enable_guidance,
            ..self.cfg.guidance.clone()
        };
        let fixed_flows = if gcfg.enabled && gcfg.flow_refresh == FlowRefresh::Once {
            Some(self.flows_from_images(&guide)?)
        } else {
            None
        };
        let sched = &m.schedule;
        let mode = self.cfg.schedule.sampler;
        let mut states = Vec::new();
        for step in sched.sampling_plan(self.cfg.schedule.sampling_steps) {
            let ts = vec![step.t; n];
            let eps = m.predict_noise(&z, &ts, Some(&c_hr), variants.enable_capm)?;
            let flows = match (&fixed_flows, gcfg.enabled) {
                (Some(f), _) => Some(f.clone()),
                (None, true) => {
                    let x0 = predict_x0(&z, step.t, &eps, sched)?;
                    Some(self.flows_from_images(&m.vae.decode(&x0, None, &[])?)?)
                }
                (None, false) => None,
            };
            let noise = match mode {
                SamplerMode::Ddpm if step.prev > 0 => Some(gaussian(&mut rng, z.shape(), z.dtype(), z.device())?),
                _ => None,
            };
            let base = p_step(&z, step, &eps, sched, mode, noise.as_ref())?;
            let (next, state) = guide_latents(&base, sched.sigma2(step.t), flows.as_ref(), &gcfg)?;
            z = next;
            states.push(state);
        }

        let out = m.decode_full(
            &z,
            Some(&feats),
            variants.enable_capm,
            variants.enable_stam,
            Some(self.cfg.fusion.omega),
        )?;
        let mut frames: Vec<Frame> = tensor_to_frames(&out)?
            .into_iter()
            .map(|f| crop(&f, h * scale, w * scale))
            .collect();
        if self.cfg.color_correct.enabled && variants.enable_color_correct {
            let reference = bicubic_upscale(lq, scale)?;
            frames = frames
                .iter()
                .zip(&reference.frames)
                .map(|(f, r)| color_correct(f, r))
                .collect::<Result<_>>()?;
        }
        let mut sr = VideoClip::new(frames)?;
        sr.frame_rate = lq.frame_rate;
        Ok(Inference { sr, guidance: states })
    }
}

/// Loads the checkpoint and super-resolves one clip with the configured
/// switches and master seed.
pub fn run_inference(cfg: &PipelineConfig, ckpt: &Path, lq: &VideoClip) -> Result<VideoClip> {
    let p = Pipeline::from_checkpoint(cfg.clone(), ckpt)?;
    Ok(p.run(lq, cfg.variants, derive_seed(cfg.seed, "infer", 0))?.sr)
}

/// Runs every variant on every clip of `split`, degraded at `quality`, and
/// measures against the ground truth. Clip `i` always uses the same noise
/// seed so variants are compared on paired samples.
pub fn evaluate(
    pipeline: &Pipeline,
    ds: &Dataset,
    split: Split,
    quality: u32,
    variants: &[Variants],
) -> Result<Vec<MetricReport>> {
    let spec = pipeline.cfg.degradation.clone().with_quality(quality);
    let mut reports = Vec::new();
    for i in ds.indices(split) {
        let hr = &ds.clips[i];
        let lq = degrade(hr, &spec)?;
        let seed = derive_seed(pipeline.cfg.seed, "infer", i as u64);
        for v in variants {
            let out = pipeline.run(&lq, *v, seed)?;
            let name = &ds.manifest.clips[i].name;
            log::info!("evaluated {name} with {}", v.label());
            reports.push(MetricReport::measure(
                name,
                &v.label(),
                Some(spec.clone()),
                &out.sr,
                hr,
                &pipeline.cfg.flow,
            )?);
        }
    }
    Ok(reports)
}

/// Split-level means for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub clips: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub warp_error: f64,
    pub psp_loss: f64,
}

/// Averages clip aggregates per variant, keeping first-seen variant order.
pub fn summarize(reports: &[MetricReport]) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for r in reports {
        let idx = match rows.iter().position(|row| row.variant == r.variant) {
            Some(i) => i,
            None => {
                rows.push(AblationRow {
                    variant: r.variant.clone(),
                    clips: 0,
                    psnr_y: 0.0,
                    ssim_y: 0.0,
                    warp_error: 0.0,
                    psp_loss: 0.0,
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        row.clips += 1;
        row.psnr_y += r.aggregate.psnr_y;
        row.ssim_y += r.aggregate.ssim_y;
        row.warp_error += r.aggregate.warp_error;
        row.psp_loss += r.aggregate.psp_loss;
    }
    for row in &mut rows {
        let n = row.clips.max(1) as f64;
        row.psnr_y /= n;
        row.ssim_y /= n;
        row.warp_error /= n;
        row.psp_loss /= n;
    }
    rows
}

/// Markdown comparison table.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | clips | PSNR-Y | SSIM-Y | warp error | PSP loss |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.3} | {:.4} | {:.6} | {:.6} |\n",
            r.variant, r.clips, r.psnr_y, r.ssim_y, r.warp_error, r.psp_loss
        ));
    }
    s
}

pub fn write_rows_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
