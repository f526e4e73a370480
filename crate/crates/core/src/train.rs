//! Staged training: VAE, base UNet, distortion-control warmup, then joint
//! fine-tuning of every added module with the base encoders frozen.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointManifest};
use crate::config::PipelineConfig;
use crate::dataset::{Dataset, Split};
use crate::degrade::degrade;
use crate::diffusion::{noise_loss, predict_x0_each, q_sample_each};
use crate::error::{Error, Result};
use crate::frame::VideoClip;
use crate::model::{Model, Stage};
use crate::nn::{l1_loss, mse_loss, Adam};
use crate::rng::{derive_seed, gaussian, seeded, Rng};
use crate::vae::EncoderFeatures;

pub const FINAL_CHECKPOINT: &str = "model.safetensors";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stages to run, in order. Empty means all four.
    pub stages: Vec<Stage>,
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many optimizer steps in this call.
    pub stop_after: Option<usize>,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub parts: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Latest checkpoint written.
    pub checkpoint: PathBuf,
    /// Losses recorded during this call, per stage.
    pub losses: BTreeMap<Stage, Vec<LossRecord>>,
    /// True when every requested stage ran to its configured length.
    pub finished: bool,
}

fn stage_steps(cfg: &PipelineConfig, stage: Stage) -> usize {
    match stage {
        Stage::Vae => cfg.train.vae_steps,
        Stage::Unet => cfg.train.unet_steps,
        Stage::Dcm => cfg.dcm.pretrain_steps,
        Stage::Joint => cfg.train.joint_steps,
    }
}

fn stage_lr(cfg: &PipelineConfig, stage: Stage) -> f64 {
    match stage {
        Stage::Vae => cfg.train.lr_vae,
        Stage::Unet => cfg.train.lr_unet,
        Stage::Dcm => cfg.train.lr_dcm,
        Stage::Joint => cfg.train.lr_joint,
    }
}

/// Training clips as tensors, plus a cache of degraded versions.
struct TrainData {
    hr: Vec<Tensor>,
    clips: Vec<VideoClip>,
    lq: HashMap<(usize, u32), Tensor>,
    latents: Option<Vec<Tensor>>,
}

impl TrainData {
    fn new(ds: &Dataset, model: &Model) -> Result<Self> {
        let idx = ds.indices(Split::Train);
        if idx.is_empty() {
            return Err(Error::Config("dataset has no training clips".into()));
        }
        let clips: Vec<VideoClip> = idx.iter().map(|&i| ds.clips[i].clone()).collect();
        let hr = clips
            .iter()
            .map(|c| c.to_tensor(model.dtype(), &model.device()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hr,
            clips,
            lq: HashMap::new(),
            latents: None,
        })
    }

    fn lq(&mut self, cfg: &PipelineConfig, model: &Model, clip: usize, quality: u32) -> Result<Tensor> {
        if let Some(t) = self.lq.get(&(clip, quality)) {
            return Ok(t.clone());
        }
        let spec = cfg.degradation.with_quality(quality);
        let t = degrade(&self.clips[clip], &spec)?.to_tensor(model.dtype(), &model.device())?;
        self.lq.insert((clip, quality), t.clone());
        Ok(t)
    }

    /// Normalised latents of every clip; the VAE encoder is frozen after
    /// stage one so these are computed once.
    fn latents(&mut self, model: &Model) -> Result<&[Tensor]> {
        if self.latents.is_none() {
            let z = self.hr.iter().map(|x| model.vae.encode(x)).collect::<Result<Vec<_>>>()?;
            self.latents = Some(z);
        }
        Ok(self.latents.as_deref().expect("filled above"))
    }
}

struct Batch {
    clips: Vec<usize>,
    qualities: Vec<u32>,
}

fn sample_batch(cfg: &PipelineConfig, n_clips: usize, rng: &mut Rng) -> Batch {
    let b = cfg.train.batch_clips.max(1);
    let clips = (0..b).map(|_| rng.random_range(0..n_clips)).collect();
    let qualities = (0..b)
        .map(|_| rng.random_range(cfg.train.quality_min..=cfg.train.quality_max))
        .collect();
    Batch { clips, qualities }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn slice_features(f: &EncoderFeatures, start: usize, len: usize) -> Result<EncoderFeatures> {
    Ok(EncoderFeatures {
        levels: f
            .levels
            .iter()
            .map(|t| Ok(t.narrow(0, start, len)?.detach()))
            .collect::<Result<Vec<_>>>()?,
    })
}

/// One step's loss graph and its named components.
struct StepLoss {
    total: Tensor,
    parts: Vec<(String, f64)>,
}

struct Trainer<'a> {
    cfg: &'a PipelineConfig,
    model: Model,
    data: TrainData,
    manifest: CheckpointManifest,
    out_dir: PathBuf,
    last_good: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.name(), 0)
    }

    fn step_rng(&self, stage: Stage, step: u64) -> Rng {
        seeded(derive_seed(self.stage_seed(stage), "step", step))
    }

    fn loss(&mut self, stage: Stage, step: u64) -> Result<StepLoss> {
        let mut rng = self.step_rng(stage, step);
        let batch = sample_batch(self.cfg, self.data.hr.len(), &mut rng);
        match stage {
            Stage::Vae => self.vae_loss(&batch, &mut rng),
            Stage::Unet => self.unet_loss(&batch, &mut rng),
            Stage::Dcm => self.dcm_loss(&batch),
            Stage::Joint => self.joint_loss(&batch, &mut rng),
        }
    }

    fn hr_batch(&self, batch: &Batch) -> Result<Tensor> {
        let parts: Vec<&Tensor> = batch.clips.iter().map(|&c| &self.data.hr[c]).collect();
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn lq_batch(&mut self, batch: &Batch) -> Result<Tensor> {
        let parts = batch
            .clips
            .iter()
            .zip(&batch.qualities)
            .map(|(&c, &q)| self.data.lq(self.cfg, &self.model, c, q))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn vae_loss(&mut self, batch: &Batch, rng: &mut Rng) -> Result<StepLoss> {
        let x = self.hr_batch(batch)?;
        let m = &self.model;
        let (post, _) = m.vae.encode_posterior(&x)?;
        let noise = gaussian(rng, post.mean.shape(), x.dtype(), x.device())?;
        let z = (&post.mean + (post.logvar.affine(0.5, 0.0)?.exp()? * noise)?)?;
        let rec = m.vae.decode_raw(&m.vae.normalize(&z)?, None, &[])?;
        let mse = mse_loss(&rec, &x)?;
        let kl = post.kl()?;
        let total = (&mse + (&kl * self.cfg.train.kl_weight)?)?;
        Ok(StepLoss {
            parts: vec![("mse".into(), scalar(&mse)?), ("kl".into(), scalar(&kl)?)],
            total,
        })
    }

    fn frame_timesteps(&self, batch: &Batch, frames: usize, rng: &mut Rng, per_frame: bool) -> Vec<usize> {
        let steps = self.model.schedule.steps();
        let mut ts = Vec::with_capacity(batch.clips.len() * frames);
        for _ in 0..batch.clips.len() {
            if per_frame {
                ts.extend((0..frames).map(|_| rng.random_range(1..=steps)));
            } else {
                let t = rng.random_range(1..=steps);
                ts.extend(std::iter::repeat_n(t, frames));
            }
        }
        ts
    }

    fn unet_loss(&mut self, batch: &Batch, rng: &mut Rng) -> Result<StepLoss> {
        let frames = self.data.hr[0].dim(0)?;
        let ts = self.frame_timesteps(batch, frames, rng, true);
        let lat = self.data.latents(&self.model)?;
        let z0 = Tensor::cat(&batch.clips.iter().map(|&c| &lat[c]).collect::<Vec<_>>(), 0)?;
        let eps = gaussian(rng, z0.shape(), z0.dtype(), z0.device())?;
        let z_t = q_sample_each(&z0, &ts, &eps, &self.model.schedule)?;
        let eps_hat = self.model.predict_noise(&z_t, &ts, None, false)?;
        let loss = noise_loss(&eps, &eps_hat)?;
        Ok(StepLoss {
            parts: vec![("noise".into(), scalar(&loss)?)],
            total: loss,
        })
    }

    fn dcm_loss(&mut self, batch: &Batch) -> Result<StepLoss> {
        let hr = self.hr_batch(batch)?;
        let lq = self.lq_batch(batch)?;
        let loss = self.model.dcm.loss(&lq, &hr)?;
        Ok(StepLoss {
            parts: vec![("l1".into(), scalar(&loss)?)],
            total: loss,
        })
    }

    fn joint_loss(&mut self, batch: &Batch, rng: &mut Rng) -> Result<StepLoss> {
        let frames = self.data.hr[0].dim(0)?;
        let hr = self.hr_batch(batch)?;
        let lq = self.lq_batch(batch)?;
        let ts = self.frame_timesteps(batch, frames, rng, false);
        let lat = self.data.latents(&self.model)?;
        let z0 = Tensor::cat(&batch.clips.iter().map(|&c| &lat[c]).collect::<Vec<_>>(), 0)?;
        let eps = gaussian(rng, z0.shape(), z0.dtype(), z0.device())?;
        let m = &self.model;
        let tc = &self.cfg.train;

        let guide = m.dcm.enhance_raw(&lq)?;
        let dcm_l1 = l1_loss(&guide, &hr)?;
        let guide_in = if tc.joint_dcm_gradients { guide.clamp(0.0, 1.0)? } else { guide.detach().clamp(0.0, 1.0)? };
        let (c_hr, feats) = m.vae.encode_with_features(&guide_in)?;

        let z_t = q_sample_each(&z0, &ts, &eps, &m.schedule)?;
        let eps_hat = m.predict_noise(&z_t, &ts, Some(&c_hr), true)?;
        let diff = noise_loss(&eps, &eps_hat)?;

        let x0_hat = predict_x0_each(&z_t, &ts, &eps_hat.detach(), &m.schedule)?;
        let mut decoded = Vec::with_capacity(batch.clips.len());
        for b in 0..batch.clips.len() {
            let z = x0_hat.narrow(0, b * frames, frames)?;
            let f = slice_features(&feats, b * frames, frames)?;
            decoded.push(m.decode_full_raw(&z, Some(&f), true, true, Some(self.cfg.fusion.omega))?);
        }
        let dec_l1 = l1_loss(&Tensor::cat(&decoded, 0)?, &hr)?;

        let total = ((&diff * tc.weight_diffusion)? + (&dec_l1 * tc.weight_decoder)?)?;
        let total = (total + (&dcm_l1 * tc.weight_dcm)?)?;
        Ok(StepLoss {
            parts: vec![
                ("noise".into(), scalar(&diff)?),
                ("decoder_l1".into(), scalar(&dec_l1)?),
                ("dcm_l1".into(), scalar(&dcm_l1)?),
            ],
            total,
        })
    }

    /// Posterior means of every training frame, fed to the latent normaliser.
    fn fit_latent_norm(&mut self) -> Result<()> {
        let means = self
            .data
            .hr
            .iter()
            .map(|x| Ok(self.model.vae.encode_posterior(x)?.0.mean))
            .collect::<Result<Vec<_>>>()?;
        self.model.vae.fit_latent_norm(&Tensor::cat(&means, 0)?, self.cfg.train.latent_std)?;
        self.data.latents = None;
        Ok(())
    }

    fn checkpoint(&mut self, stage: Stage, step: u64, opt: Option<&Adam>, name: &str) -> Result<PathBuf> {
        self.manifest.stage = stage.name().into();
        self.manifest.step = step;
        self.manifest.completed.insert(stage.name().into(), step);
        let path = self.out_dir.join("checkpoints").join(name);
        checkpoint::save(&path, &self.model, &self.manifest, opt)?;
        self.last_good = Some(path.clone());
        Ok(path)
    }

    fn run_stage(
        &mut self,
        stage: Stage,
        resume: Option<&Checkpoint>,
        budget: &mut Option<usize>,
        log_every: usize,
    ) -> Result<(Vec<LossRecord>, bool)> {
        let total = stage_steps(self.cfg, stage) as u64;
        let start = self.manifest.completed.get(stage.name()).copied().unwrap_or(0);
        if start >= total {
            return Ok((Vec::new(), true));
        }
        self.manifest
            .seeds
            .insert(format!("stage.{}", stage.name()), self.stage_seed(stage));
        let mut opt = Adam::new(self.model.stage_params(stage), stage_lr(self.cfg, stage))?;
        let restored = match resume {
            Some(ck) if ck.manifest.stage == stage.name() && start > 0 => ck.restore_optimizer(&mut opt, self.model.dtype())?,
            _ => false,
        };
        if start > 0 && !restored {
            log::warn!("resuming {} at step {start} without optimizer state", stage.name());
        }
        if start == 0 && stage == Stage::Joint {
            self.model.init_control_from_base(self.cfg.train.control_guidance_gain)?;
        }
        let csv_path = self.out_dir.join(format!("loss_{}.csv", stage.name()));
        let mut records = Vec::new();
        let every = self.cfg.train.checkpoint_every.max(1) as u64;
        for step in start + 1..=total {
            if budget.is_some_and(|b| b == 0) {
                self.checkpoint(stage, step - 1, Some(&opt), &format!("{}_{:06}.safetensors", stage.name(), step - 1))?;
                append_losses(&csv_path, &records, start)?;
                return Ok((records, false));
            }
            let l = self.loss(stage, step)?;
            let value = scalar(&l.total)?;
            if !value.is_finite() {
                append_losses(&csv_path, &records, start)?;
                return Err(Error::Diverged {
                    step: step as usize,
                    last_good: self.last_good.clone(),
                });
            }
            let grads = l.total.backward()?;
            opt.step(&grads)?;
            if let Some(b) = budget.as_mut() {
                *b -= 1;
            }
            if log_every > 0 && (step % log_every as u64 == 0 || step == 1) {
                log::info!("{} step {step}/{total} loss {value:.5} {:?}", stage.name(), l.parts);
            }
            records.push(LossRecord {
                step,
                total: value,
                parts: l.parts,
            });
            if stage == Stage::Vae && step == total {
                self.fit_latent_norm()?;
            }
            if step % every == 0 || step == total {
                self.checkpoint(stage, step, Some(&opt), &format!("{}_{:06}.safetensors", stage.name(), step))?;
            }
        }
        append_losses(&csv_path, &records, start)?;
        Ok((records, true))
    }
}

/// Rewrites the stage's loss CSV keeping rows before `start`, then appends
/// `records`.
fn append_losses(path: &Path, records: &[LossRecord], start: u64) -> Result<()> {
    let mut kept: Vec<Vec<String>> = Vec::new();
    let mut header: Option<Vec<String>> = None;
    if path.exists() {
        let mut rd = csv::Reader::from_path(path)?;
        header = Some(rd.headers()?.iter().map(String::from).collect());
        for row in rd.records() {
            let row = row?;
            let step: u64 = row.get(0).and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step <= start {
                kept.push(row.iter().map(String::from).collect());
            }
        }
    }
    let header = match (header, records.first()) {
        (_, Some(r)) => {
            let mut h = vec!["step".to_string(), "total".to_string()];
            h.extend(r.parts.iter().map(|(k, _)| k.clone()));
            h
        }
        (Some(h), None) => h,
        (None, None) => return Ok(()),
    };
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(&header)?;
    for row in kept {
        wr.write_record(&row)?;
    }
    for r in records {
        let mut row = vec![r.step.to_string(), format!("{:.8e}", r.total)];
        row.extend(r.parts.iter().map(|(_, v)| format!("{v:.8e}")));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Runs the configured stages on the dataset at `cfg.dataset.root`.
pub fn run_training(cfg: &PipelineConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let ds = Dataset::open(&cfg.dataset.root)?;
    run_training_on(cfg, &ds, opts)
}

/// Like [`run_training`] with an already loaded dataset.
pub fn run_training_on(cfg: &PipelineConfig, ds: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let model = Model::new(cfg, derive_seed(cfg.seed, "init", 0))?;
    let resume = match &opts.resume {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    let mut manifest = CheckpointManifest::new(&model, cfg.hash(), cfg.seed);
    manifest.seeds.insert("init".into(), derive_seed(cfg.seed, "init", 0));
    if let Some(ck) = &resume {
        ck.apply(&model)?;
        if ck.manifest.master_seed != cfg.seed {
            log::warn!(
                "checkpoint was trained with seed {}, continuing with seed {}",
                ck.manifest.master_seed,
                cfg.seed
            );
        }
        manifest.completed = ck.manifest.completed.clone();
        manifest.seeds.extend(ck.manifest.seeds.clone());
    }
    std::fs::create_dir_all(&cfg.train.out_dir)?;
    std::fs::write(cfg.train.out_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let data = TrainData::new(ds, &model)?;
    let mut trainer = Trainer {
        cfg,
        model,
        data,
        manifest,
        out_dir: cfg.train.out_dir.clone(),
        last_good: opts.resume.clone(),
    };
    let stages = if opts.stages.is_empty() { Stage::ALL.to_vec() } else { opts.stages.clone() };
    let mut budget = opts.stop_after;
    let mut losses = BTreeMap::new();
    let mut finished = true;
    for stage in stages {
        let (records, done) = trainer.run_stage(stage, resume.as_ref(), &mut budget, opts.log_every)?;
        losses.insert(stage, records);
        if !done {
            finished = false;
            break;
        }
    }
    let path = cfg.train.out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&path, &trainer.model, &trainer.manifest, None)?;
    Ok(TrainReport {
        checkpoint: path,
        losses,
        finished,
    })
}

/// Mean total loss over `records[from..from + len]`.
pub fn window_mean(records: &[LossRecord], from: usize, len: usize) -> f64 {
    let w = &records[from..(from + len).min(records.len())];
    w.iter().map(|r| r.total).sum::<f64>() / w.len().max(1) as f64
}
