//! Low-quality input generation: bicubic ×`scale` decimation followed by a
//! per-frame blockwise DCT quantizer standing in for a video codec.
//!
//! `quality` follows CRF semantics: 0 is lossless, 51 is the coarsest, and
//! every +6 doubles the quantization step.

use std::path::Path;
use std::process::Command;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::frame::{self, Frame, VideoClip};
use crate::resize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub scale: usize,
    pub quality: u32,
    pub block: usize,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            scale: 4,
            quality: 25,
            block: 8,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 1 {
            return Err(Error::Param {
                name: "scale",
                reason: "must be >= 1".into(),
            });
        }
        if self.quality > 51 {
            return Err(Error::Param {
                name: "quality",
                reason: format!("must be in [0, 51], got {}", self.quality),
            });
        }
        if ![4, 8, 16].contains(&self.block) {
            return Err(Error::Param {
                name: "block",
                reason: format!("must be 4, 8 or 16, got {}", self.block),
            });
        }
        Ok(())
    }

    pub fn with_quality(mut self, quality: u32) -> Self {
        self.quality = quality;
        self
    }
}

/// AC quantization step for luma, in [0,1] pixel units. Zero at quality 0.
pub fn luma_step(quality: u32) -> f64 {
    (2f64.powf(quality as f64 / 6.0) - 1.0) / 255.0
}

pub const CHROMA_STEP_RATIO: f64 = 1.5;
/// The DC coefficient is never quantized coarser than one 8-bit level.
const DC_STEP_MAX: f64 = 1.0 / 255.0;

fn dct_basis(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

fn quantize(v: f64, step: f64) -> f64 {
    if step <= 0.0 {
        v
    } else {
        (v / step).round() * step
    }
}

/// Quantize one plane (dims multiples of `n`) in place.
fn code_plane(plane: &mut Array2<f64>, basis: &Array2<f64>, step: f64) {
    let n = basis.nrows();
    let (h, w) = plane.dim();
    let dc_step = step.min(DC_STEP_MAX);
    for by in (0..h).step_by(n) {
        for bx in (0..w).step_by(n) {
            let block = plane.slice(ndarray::s![by..by + n, bx..bx + n]).to_owned();
            let mut coef = basis.dot(&block).dot(&basis.t());
            for ((u, v), c) in coef.indexed_iter_mut() {
                *c = quantize(*c, if u == 0 && v == 0 { dc_step } else { step });
            }
            let rec = basis.t().dot(&coef).dot(basis);
            plane.slice_mut(ndarray::s![by..by + n, bx..bx + n]).assign(&rec);
        }
    }
}

pub fn compress_frame(frame: &Frame, spec: &DegradationSpec) -> Result<Frame> {
    spec.validate()?;
    let (h, w, c) = frame.dim();
    if spec.quality == 0 {
        return Ok(frame.mapv(|v| v.clamp(0.0, 1.0)));
    }
    let padded = frame::pad_to_multiple(frame, spec.block);
    let (ph, pw, _) = padded.dim();
    let basis = dct_basis(spec.block);
    let step = luma_step(spec.quality);
    let px = |i, j, k| padded[[i, j, k]] as f64;
    let out = if c >= 3 {
        let mut y = Array2::from_shape_fn((ph, pw), |(i, j)| 0.299 * px(i, j, 0) + 0.587 * px(i, j, 1) + 0.114 * px(i, j, 2));
        let mut cb = Array2::from_shape_fn((ph, pw), |(i, j)| {
            -0.168736 * px(i, j, 0) - 0.331264 * px(i, j, 1) + 0.5 * px(i, j, 2) + 0.5
        });
        let mut cr = Array2::from_shape_fn((ph, pw), |(i, j)| {
            0.5 * px(i, j, 0) - 0.418688 * px(i, j, 1) - 0.081312 * px(i, j, 2) + 0.5
        });
        code_plane(&mut y, &basis, step);
        code_plane(&mut cb, &basis, step * CHROMA_STEP_RATIO);
        code_plane(&mut cr, &basis, step * CHROMA_STEP_RATIO);
        Frame::from_shape_fn((h, w, c), |(i, j, k)| {
            let (yy, u, v) = (y[[i, j]], cb[[i, j]] - 0.5, cr[[i, j]] - 0.5);
            let val = match k {
                0 => yy + 1.402 * v,
                1 => yy - 0.344136 * u - 0.714136 * v,
                2 => yy + 1.772 * u,
                _ => px(i, j, k),
            };
            val.clamp(0.0, 1.0) as f32
        })
    } else {
        let mut planes: Vec<Array2<f64>> = (0..c)
            .map(|k| Array2::from_shape_fn((ph, pw), |(i, j)| px(i, j, k)))
            .collect();
        for p in planes.iter_mut() {
            code_plane(p, &basis, step);
        }
        Frame::from_shape_fn((h, w, c), |(i, j, k)| planes[k][[i, j]].clamp(0.0, 1.0) as f32)
    };
    Ok(out)
}

/// Per-frame codec simulation.
pub fn compress_sim(clip: &VideoClip, spec: &DegradationSpec) -> Result<VideoClip> {
    spec.validate()?;
    clip.map_frames(|f| compress_frame(f, spec))
}

/// `downsample(·, scale)` then `compress_sim`.
pub fn degrade(clip: &VideoClip, spec: &DegradationSpec) -> Result<VideoClip> {
    spec.validate()?;
    let small = resize::downsample(clip, spec.scale)?;
    compress_sim(&small, spec)
}

/// Run an external encoder instead of the simulator. The template is passed
/// to `sh -c` after substituting `{in}`, `{out}`, `{scale}` and `{quality}`;
/// `{in}` holds PNG frames and the command must leave PNG frames in `{out}`.
pub fn degrade_external(clip: &VideoClip, spec: &DegradationSpec, template: &str, work_dir: &Path) -> Result<VideoClip> {
    spec.validate()?;
    let input = work_dir.join("in");
    let output = work_dir.join("out");
    frame::write_clip_dir(clip, &input)?;
    std::fs::create_dir_all(&output)?;
    let cmd = template
        .replace("{in}", &input.to_string_lossy())
        .replace("{out}", &output.to_string_lossy())
        .replace("{scale}", &spec.scale.to_string())
        .replace("{quality}", &spec.quality.to_string());
    let status = Command::new("sh").arg("-c").arg(&cmd).status()?;
    if !status.success() {
        return Err(contract(format!("external encoder exited with {status}: {cmd}")));
    }
    frame::read_clip_dir(&output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_y;

    pub(crate) fn texture(h: usize, w: usize) -> Frame {
        Frame::from_shape_fn((h, w, 3), |(i, j, k)| {
            let (x, y) = (j as f64, i as f64);
            let v = 0.5
                + 0.2 * (0.31 * x + 0.17 * y + k as f64).sin()
                + 0.15 * (0.9 * x - 0.55 * y).cos()
                + 0.1 * ((1.7 * x).sin() * (1.3 * y + 0.4 * k as f64).cos());
            v.clamp(0.0, 1.0) as f32
        })
    }

    #[test]
    fn basis_is_orthonormal() {
        for n in [4, 8, 16] {
            let b = dct_basis(n);
            let p = b.dot(&b.t());
            for ((i, j), v) in p.indexed_iter() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quality_zero_is_lossless() {
        let f = texture(20, 24);
        let spec = DegradationSpec { scale: 1, quality: 0, ..Default::default() };
        let out = compress_frame(&f, &spec).unwrap();
        let err = out.iter().zip(f.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 255.0);
        assert!(luma_step(0) <= 1.0 / 255.0);
    }

    #[test]
    fn constant_frames_survive_any_quality() {
        let f = Frame::from_shape_fn((16, 16, 3), |(_, _, k)| [0.2, 0.55, 0.81][k]);
        for q in [1, 15, 25, 35, 51] {
            let spec = DegradationSpec { quality: q, ..Default::default() };
            let out = compress_frame(&f, &spec).unwrap();
            let err = out.iter().zip(f.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err <= 1.0 / 255.0, "q={q} err={err}");
        }
    }

    #[test]
    fn psnr_falls_as_quality_worsens() {
        let f = texture(32, 32);
        let mut last = f64::INFINITY;
        for q in [0, 15, 25, 35, 51] {
            let spec = DegradationSpec { quality: q, ..Default::default() };
            let p = psnr_y(&compress_frame(&f, &spec).unwrap(), &f).unwrap();
            assert!(p < last, "q={q}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DegradationSpec { quality: 52, ..Default::default() }.validate().is_err());
        assert!(DegradationSpec { block: 6, ..Default::default() }.validate().is_err());
        assert!(DegradationSpec { scale: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn degrade_shapes_and_identity() {
        let clip = VideoClip::new(vec![texture(64, 64), texture(64, 64)]).unwrap();
        let out = degrade(&clip, &DegradationSpec::default()).unwrap();
        assert_eq!(out.dims(), (16, 16, 3));
        let id = degrade(&clip, &DegradationSpec { scale: 1, quality: 0, ..Default::default() }).unwrap();
        for (a, b) in id.frames[0].iter().zip(clip.frames[0].iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn odd_sizes_are_padded_internally() {
        let f = texture(13, 11);
        let out = compress_frame(&f, &DegradationSpec { quality: 30, ..Default::default() }).unwrap();
        assert_eq!(out.dim(), (13, 11, 3));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn external_encoder_hook_runs_template() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::new(vec![texture(8, 8)]).unwrap();
        let out = degrade_external(&clip, &DegradationSpec::default(), "cp {in}/*.png {out}/", dir.path()).unwrap();
        assert_eq!(out.len(), 1);
        assert!(degrade_external(&clip, &DegradationSpec::default(), "exit 3", dir.path()).is_err());
    }
}
