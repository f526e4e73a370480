//! Self-contained quality and temporal-consistency measurements.
//!
//! Full-reference metrics are computed on BT.601 luma. Functions are generic
//! over the sample type so closed-form checks can run in `f64`.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::degrade::DegradationSpec;
use crate::error::{contract, Result};
use crate::flow::{estimate_flow, FlowParams};
use crate::frame::{Frame, VideoClip};
use crate::warp::warp_plane;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSP_WINDOW: usize = 7;

/// Metrics that need external pretrained models and are never approximated.
pub const UNAVAILABLE_METRICS: [&str; 7] = ["lpips", "dists", "fid", "niqe", "maniqa", "clip_iqa", "vmaf"];

pub fn luma_of<T: Copy + Into<f64>>(frame: &Array3<T>) -> Array2<f64> {
    let (h, w, c) = frame.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        if c >= 3 {
            0.299 * frame[[i, j, 0]].into() + 0.587 * frame[[i, j, 1]].into() + 0.114 * frame[[i, j, 2]].into()
        } else {
            frame[[i, j, 0]].into()
        }
    })
}

fn same_dims<T>(a: &Array3<T>, b: &Array3<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(contract(format!("frame dims differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// PSNR on luma with peak 1.0; identical inputs return [`PSNR_CAP`].
pub fn psnr_y<T: Copy + Into<f64>>(a: &Array3<T>, b: &Array3<T>) -> Result<f64> {
    same_dims(a, b)?;
    let ya = luma_of(a);
    let yb = luma_of(b);
    let mse = ya.iter().zip(yb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ya.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).clamp(0.0, PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering with a symmetric kernel.
fn filter_valid(p: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = p.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let tmp = Array2::from_shape_fn((h, ow), |(i, j)| (0..n).map(|t| k[t] * p[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..n).map(|t| k[t] * tmp[[i + t, j]]).sum::<f64>())
}

/// Single-scale SSIM on luma: 11×11 Gaussian window (σ = 1.5), dynamic
/// range 1, averaged over valid window positions.
pub fn ssim_y<T: Copy + Into<f64>>(a: &Array3<T>, b: &Array3<T>) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(contract(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} inputs, got {h}x{w}")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = gaussian_window();
    let ya = luma_of(a);
    let yb = luma_of(b);
    let mu_a = filter_valid(&ya, &k);
    let mu_b = filter_valid(&yb, &k);
    let e_aa = filter_valid(&(&ya * &ya), &k);
    let e_bb = filter_valid(&(&yb * &yb), &k);
    let e_ab = filter_valid(&(&ya * &yb), &k);
    let mut acc = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
        let va = e_aa[[i, j]] - ma * ma;
        let vb = e_bb[[i, j]] - mb * mb;
        let cov = e_ab[[i, j]] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok((acc / mu_a.len() as f64).clamp(-1.0, 1.0))
}

/// A metric value together with an optional degenerate-case flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub flag: Option<String>,
}

/// Mean L1 between each luma frame warped onto its successor and the
/// successor, per consecutive pair.
pub fn pair_warp_errors(clip: &VideoClip, params: &FlowParams) -> Result<Vec<f64>> {
    let ys: Vec<Array2<f32>> = clip.frames.iter().map(|f| luma_of(f).mapv(|v| v as f32)).collect();
    ys.windows(2)
        .map(|pair| {
            let flow = estimate_flow(&pair[1], &pair[0], params)?;
            let warped = warp_plane(&pair[0], &flow)?;
            Ok(warped
                .iter()
                .zip(pair[1].iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / warped.len() as f64)
        })
        .collect()
}

pub fn warp_error(clip: &VideoClip, params: &FlowParams) -> Result<Measured> {
    if clip.len() < 2 {
        log::warn!("warp error of a single-frame clip is defined as 0");
        return Ok(Measured {
            value: 0.0,
            flag: Some("single frame: warp error undefined, reported as 0".into()),
        });
    }
    let errs = pair_warp_errors(clip, params)?;
    Ok(Measured {
        value: errs.iter().sum::<f64>() / errs.len() as f64,
        flag: None,
    })
}

fn local_variance(p: &Array2<f64>, window: usize) -> Array2<f64> {
    let (h, w) = p.dim();
    let r = (window / 2) as i64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (mut s, mut s2) = (0.0, 0.0);
        for di in -r..=r {
            for dj in -r..=r {
                let v = p[[
                    (i as i64 + di).clamp(0, h as i64 - 1) as usize,
                    (j as i64 + dj).clamp(0, w as i64 - 1) as usize,
                ]];
                s += v;
                s2 += v * v;
            }
        }
        let n = (window * window) as f64;
        (s2 / n - (s / n) * (s / n)).max(0.0)
    })
}

/// Perception-sensitive pixel loss: luma L1 weighted by the ground truth's
/// 7×7 local variance (normalised by its frame maximum), divided by the mean
/// weight. A ground truth with no variance falls back to plain L1 (flagged).
pub fn psp_loss<T: Copy + Into<f64>>(sr: &Array3<T>, gt: &Array3<T>) -> Result<Measured> {
    same_dims(sr, gt)?;
    let ys = luma_of(sr);
    let yg = luma_of(gt);
    let var = local_variance(&yg, PSP_WINDOW);
    let vmax = var.iter().copied().fold(0.0, f64::max);
    let l1: Vec<f64> = ys.iter().zip(yg.iter()).map(|(a, b)| (a - b).abs()).collect();
    if vmax <= 1e-12 {
        return Ok(Measured {
            value: l1.iter().sum::<f64>() / l1.len() as f64,
            flag: Some("ground truth has no local variance; plain L1 reported".into()),
        });
    }
    let weights: Vec<f64> = var.iter().map(|v| v / vmax).collect();
    let mean_w = weights.iter().sum::<f64>() / weights.len() as f64;
    let weighted = weights.iter().zip(&l1).map(|(w, e)| w * e).sum::<f64>() / l1.len() as f64;
    Ok(Measured {
        value: weighted / mean_w,
        flag: None,
    })
}

/// Row `row` of every frame stacked into an `N×W×C` image.
pub fn temporal_profile(clip: &VideoClip, row: usize) -> Result<Frame> {
    let (h, w, c) = clip.dims();
    if row >= h {
        return Err(contract(format!("row {row} outside frame height {h}")));
    }
    Ok(Frame::from_shape_fn((clip.len(), w, c), |(n, j, k)| clip.frames[n][[row, j, k]]))
}

pub fn write_temporal_profile(clip: &VideoClip, row: usize, path: &Path) -> Result<()> {
    crate::frame::write_png(&temporal_profile(clip, row)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub warp_error: f64,
    pub psp_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAggregate {
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub warp_error: f64,
    pub psp_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_id: String,
    pub variant: String,
    pub degradation: Option<DegradationSpec>,
    pub frames: Vec<FrameMetrics>,
    pub aggregate: ClipAggregate,
    pub flags: Vec<String>,
    pub unavailable: Vec<String>,
}

impl MetricReport {
    /// Measures `pred` against `gt` frame by frame. The per-frame warp error
    /// is the mean over the consecutive pairs the frame takes part in.
    pub fn measure(
        clip_id: &str,
        variant: &str,
        degradation: Option<DegradationSpec>,
        pred: &VideoClip,
        gt: &VideoClip,
        flow: &FlowParams,
    ) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(contract(format!("prediction has {} frames, ground truth {}", pred.len(), gt.len())));
        }
        let mut flags = Vec::new();
        let pairs = if pred.len() >= 2 {
            pair_warp_errors(pred, flow)?
        } else {
            flags.push("single frame: warp error undefined, reported as 0".to_string());
            Vec::new()
        };
        let mut frames = Vec::with_capacity(pred.len());
        for (i, (p, g)) in pred.frames.iter().zip(&gt.frames).enumerate() {
            let psp = psp_loss(p, g)?;
            if let Some(f) = psp.flag {
                flags.push(format!("frame {i}: {f}"));
            }
            let touching: Vec<f64> = [i.checked_sub(1), (i + 1 < pred.len()).then_some(i)]
                .into_iter()
                .flatten()
                .filter_map(|k| pairs.get(k).copied())
                .collect();
            let warp = if touching.is_empty() {
                0.0
            } else {
                touching.iter().sum::<f64>() / touching.len() as f64
            };
            frames.push(FrameMetrics {
                index: i,
                psnr_y: psnr_y(p, g)?,
                ssim_y: ssim_y(p, g)?,
                warp_error: warp,
                psp_loss: psp.value,
            });
        }
        let n = frames.len() as f64;
        let aggregate = ClipAggregate {
            psnr_y: frames.iter().map(|f| f.psnr_y).sum::<f64>() / n,
            ssim_y: frames.iter().map(|f| f.ssim_y).sum::<f64>() / n,
            warp_error: if pairs.is_empty() { 0.0 } else { pairs.iter().sum::<f64>() / pairs.len() as f64 },
            psp_loss: frames.iter().map(|f| f.psp_loss).sum::<f64>() / n,
        };
        Ok(Self {
            clip_id: clip_id.to_string(),
            variant: variant.to_string(),
            degradation,
            frames,
            aggregate,
            flags,
            unavailable: UNAVAILABLE_METRICS.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn write_json(reports: &[MetricReport], path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
        Ok(())
    }

    /// One row per frame.
    pub fn write_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["clip_id", "variant", "frame", "psnr_y", "ssim_y", "warp_error", "psp_loss"])?;
        for r in reports {
            for f in &r.frames {
                w.write_record([
                    r.clip_id.clone(),
                    r.variant.clone(),
                    f.index.to_string(),
                    format!("{:.6}", f.psnr_y),
                    format!("{:.6}", f.ssim_y),
                    format!("{:.6}", f.warp_error),
                    format!("{:.6}", f.psp_loss),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
