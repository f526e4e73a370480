use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cvsr_core::config::Variants;
use cvsr_core::dataset::{synth_dataset, Dataset, MotionModel, Split};
use cvsr_core::degrade::{degrade, degrade_external, DegradationSpec};
use cvsr_core::frame::{read_clip_dir, write_clip_dir};
use cvsr_core::metrics::write_temporal_profile;
use cvsr_core::model::Stage;
use cvsr_core::pipeline::{evaluate, render_table, summarize, write_rows_csv, Pipeline};
use cvsr_core::rng::derive_seed;
use cvsr_core::train::{run_training, TrainOptions};
use cvsr_core::{MetricReport, PipelineConfig};

#[derive(Parser)]
#[command(name = "cvsr", version, about = "Diffusion super-resolution for compressed video, at toy scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset described by the config.
    Synth(SynthArgs),
    /// Downscale and compress a directory of PNG frames.
    Degrade(DegradeArgs),
    /// Run the training stages.
    Train(TrainArgs),
    /// Super-resolve a directory of low-quality frames.
    Infer(InferArgs),
    /// Compare predicted frames with ground truth.
    Eval(EvalArgs),
    /// Stack one pixel row of every frame into an image.
    Profile(ProfileArgs),
    /// Run the variant switch matrix on the held-out split.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `dataset.root` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Square frame side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pure global translation instead of the full motion model.
    #[arg(long)]
    translation_only: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    quality: u32,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 8)]
    block: usize,
    /// Shell template for an external encoder, with `{in}`, `{out}`,
    /// `{scale}` and `{quality}` placeholders.
    #[arg(long)]
    external: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stage to run (vae, unet, dcm, joint); repeat for several. Default: all.
    #[arg(long = "stage")]
    stages: Vec<String>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps, writing a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth frames; when given a metric report is written next to
    /// the output directory.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dcm: bool,
    #[arg(long)]
    no_capm: bool,
    #[arg(long)]
    no_stam: bool,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    no_color: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// JSON report path; a CSV twin is written alongside.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "pred")]
    variant: String,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    row: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    quality: u32,
    /// All 32 switch subsets instead of all-on, all-off and leave-one-out.
    #[arg(long)]
    full: bool,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn csv_twin(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec = cfg.dataset;
    if let Some(out) = a.out {
        spec.root = out;
    }
    if let Some(n) = a.clips {
        spec.num_clips = n;
        spec.test_clips = spec.test_clips.min(n.saturating_sub(1));
    }
    if let Some(f) = a.frames {
        spec.frames_per_clip = f;
    }
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if a.translation_only {
        spec.motion = MotionModel::Translation;
    }
    let manifest = synth_dataset(&spec, a.force)?;
    println!("wrote {} clips to {}", manifest.clips.len(), spec.root.display());
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    let spec = DegradationSpec {
        scale: a.scale,
        quality: a.quality,
        block: a.block,
        ..Default::default()
    };
    let clip = read_clip_dir(&a.input)?;
    let lq = match &a.external {
        Some(t) => {
            let work = std::env::temp_dir().join(format!("cvsr-degrade-{}", std::process::id()));
            let out = degrade_external(&clip, &spec, t, &work);
            let _ = std::fs::remove_dir_all(&work);
            out?
        }
        None => degrade(&clip, &spec)?,
    };
    write_clip_dir(&lq, &a.out)?;
    println!("wrote {} frames to {}", lq.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(Some(&a.config))?;
    let stages = a
        .stages
        .iter()
        .map(|s| Stage::parse(s).with_context(|| format!("unknown stage `{s}` (vae, unet, dcm, joint)")))
        .collect::<Result<Vec<_>>>()?;
    let report = run_training(
        &cfg,
        &TrainOptions {
            stages,
            resume: a.resume,
            stop_after: a.stop_after,
            log_every: a.log_every,
        },
    )?;
    for (stage, rec) in &report.losses {
        if let (Some(first), Some(last)) = (rec.first(), rec.last()) {
            println!(
                "{}: steps {}..{} loss {:.5} -> {:.5}",
                stage.name(),
                first.step,
                last.step,
                first.total,
                last.total
            );
        }
    }
    let state = if report.finished { "finished" } else { "stopped early" };
    println!("{state}; checkpoint {}", report.checkpoint.display());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = load_config(Some(&a.config))?;
    let mut v = cfg.variants;
    v.enable_dcm &= !a.no_dcm;
    v.enable_capm &= !a.no_capm;
    v.enable_stam &= !a.no_stam;
    v.enable_guidance &= !a.no_guidance;
    v.enable_color_correct &= !a.no_color;
    let seed = a.seed.unwrap_or_else(|| derive_seed(cfg.seed, "infer", 0));
    let lq = read_clip_dir(&a.input)?;
    let pipeline = Pipeline::from_checkpoint(cfg, &a.ckpt)?;
    let out = pipeline.run(&lq, v, seed)?;
    write_clip_dir(&out.sr, &a.out)?;
    println!("wrote {} frames to {}", out.sr.len(), a.out.display());
    if let Some(gt_dir) = a.gt {
        let gt = read_clip_dir(&gt_dir)?;
        let name = a.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let report = MetricReport::measure(&name, &v.label(), None, &out.sr, &gt, &pipeline.cfg.flow)?;
        let path = a.out.with_extension("report.json");
        MetricReport::write_json(std::slice::from_ref(&report), &path)?;
        MetricReport::write_csv(std::slice::from_ref(&report), &csv_twin(&path))?;
        println!(
            "PSNR-Y {:.3}  SSIM-Y {:.4}  warp {:.6}  PSP {:.6}  ({})",
            report.aggregate.psnr_y,
            report.aggregate.ssim_y,
            report.aggregate.warp_error,
            report.aggregate.psp_loss,
            path.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let pred = read_clip_dir(&a.pred)?;
    let gt = read_clip_dir(&a.gt)?;
    let name = a.pred.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = MetricReport::measure(&name, &a.variant, None, &pred, &gt, &cfg.flow)?;
    MetricReport::write_json(std::slice::from_ref(&report), &a.out)?;
    MetricReport::write_csv(std::slice::from_ref(&report), &csv_twin(&a.out))?;
    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<()> {
    let clip = read_clip_dir(&a.input)?;
    let (h, _, _) = clip.dims();
    if a.row >= h {
        bail!("row {} is outside frames of height {h}", a.row);
    }
    write_temporal_profile(&clip, a.row, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ablation_set(full: bool) -> Vec<Variants> {
    if full {
        return Variants::matrix();
    }
    let on = Variants::all(true);
    let mut set = vec![on, Variants::all(false)];
    for k in 0..5 {
        let mut v = on;
        match k {
            0 => v.enable_dcm = false,
            1 => v.enable_capm = false,
            2 => v.enable_stam = false,
            3 => v.enable_guidance = false,
            _ => v.enable_color_correct = false,
        }
        set.push(v);
    }
    set
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(Some(&a.config))?;
    let ds = Dataset::open(&cfg.dataset.root)?;
    let pipeline = Pipeline::from_checkpoint(cfg, &a.ckpt)?;
    let reports = evaluate(&pipeline, &ds, Split::Test, a.quality, &ablation_set(a.full))?;
    std::fs::create_dir_all(&a.out)?;
    MetricReport::write_json(&reports, &a.out.join("reports.json"))?;
    MetricReport::write_csv(&reports, &a.out.join("reports.csv"))?;
    let rows = summarize(&reports);
    write_rows_csv(&rows, &a.out.join("summary.csv"))?;
    let table = render_table(&rows);
    std::fs::write(a.out.join("summary.md"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Degrade(a) => degrade_cmd(a),
        Cmd::Train(a) => train(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Profile(a) => profile(a),
        Cmd::Ablate(a) => ablate(a),
    }
}
