//! Pixel-space frames and clips.
//!
//! A [`Frame`] is an `H×W×C` array of `f32` in `[0, 1]`. Network code works on
//! `N×C×H×W` tensors; the helpers at the bottom of this module convert between
//! the two layouts.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3, Axis};

use crate::error::{contract, Result};

pub type Frame = Array3<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub frame_rate: Option<f64>,
}

impl VideoClip {
    /// Builds a clip, checking that it is non-empty and every frame has the
    /// same shape. Values are clamped into `[0, 1]`.
    pub fn new(mut frames: Vec<Frame>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(contract("a clip needs at least one frame"));
        };
        let shape = first.dim();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != shape) {
            return Err(contract(format!(
                "ragged clip: frame {i} has shape {:?}, frame 0 has {:?}",
                f.dim(),
                shape
            )));
        }
        for f in frames.iter_mut() {
            f.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        Ok(Self {
            frames,
            frame_rate: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W, C)` of every frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dim()
    }

    pub fn map_frames<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&Frame) -> Result<Frame>,
    {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(frames)?;
        out.frame_rate = self.frame_rate;
        Ok(out)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        frames_to_tensor(&self.frames, dtype, device)
    }
}

/// BT.601 luma of an RGB frame; single-channel frames are returned as is.
pub fn luma(frame: &Frame) -> Array2<f64> {
    let (h, w, c) = frame.dim();
    let mut y = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            y[[i, j]] = if c >= 3 {
                0.299 * frame[[i, j, 0]] as f64
                    + 0.587 * frame[[i, j, 1]] as f64
                    + 0.114 * frame[[i, j, 2]] as f64
            } else {
                frame[[i, j, 0]] as f64
            };
        }
    }
    y
}

/// Mean over channels, used where a single plane is needed (flow estimation).
pub fn mean_channel(frame: &Frame) -> Array2<f32> {
    frame.mean_axis(Axis(2)).expect("frame has at least one channel")
}

/// Edge-replicating pad on the bottom/right so that both dims become
/// multiples of `multiple`.
pub fn pad_to_multiple(frame: &Frame, multiple: usize) -> Frame {
    let (h, w, c) = frame.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return frame.clone();
    }
    Frame::from_shape_fn((ph, pw, c), |(i, j, k)| {
        frame[[i.min(h - 1), j.min(w - 1), k]]
    })
}

pub fn crop(frame: &Frame, h: usize, w: usize) -> Frame {
    frame.slice(s![..h, ..w, ..]).to_owned()
}

/// Stack frames into an `N×C×H×W` tensor.
pub fn frames_to_tensor(frames: &[Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return Err(contract("cannot build a tensor from zero frames"));
    };
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(frames.len() * h * w * c);
    for f in frames {
        if f.dim() != (h, w, c) {
            return Err(contract("frames differ in shape"));
        }
        let chw = f.view().permuted_axes([2, 0, 1]);
        data.extend(chw.iter().copied());
    }
    Ok(Tensor::from_vec(data, (frames.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Split an `N×C×H×W` tensor into frames (values are not clamped).
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (n, c, h, w) = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let chw = Array3::from_shape_vec((c, h, w), data[i * per..(i + 1) * per].to_vec())
                .map_err(|e| contract(e.to_string()))?;
            Ok(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
        })
        .collect()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{:05}.png", index + 1)
}

pub fn write_png(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w, c) = frame.dim();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(frame[[y as usize, x as usize, 0]])])
            });
            img.save(path)?;
        }
        3 => {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([
                    to_u8(frame[[y, x, 0]]),
                    to_u8(frame[[y, x, 1]]),
                    to_u8(frame[[y, x, 2]]),
                ])
            });
            img.save(path)?;
        }
        _ => return Err(contract(format!("cannot write a {c}-channel frame as PNG"))),
    }
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Frame::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| {
        img.get_pixel(x as u32, y as u32)[k] as f32 / 255.0
    }))
}

/// Writes `frame_00001.png`, `frame_00002.png`, ... into `dir`.
pub fn write_clip_dir(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        write_png(f, &dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

/// Reads every `*.png` in `dir` in ascending file-name order.
pub fn read_clip_dir(dir: &Path) -> Result<VideoClip> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(contract(format!("no PNG frames found in {}", dir.display())));
    }
    let frames = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let f = Frame::from_shape_fn((3, 4, 2), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let t = frames_to_tensor(&[f.clone(), f.clone()], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 3, 4]);
        let v = t.get(0).unwrap().get(1).unwrap().get(2).unwrap().get(3).unwrap();
        assert_eq!(v.to_scalar::<f32>().unwrap(), 231.0);
        let back = tensor_to_frames(&t).unwrap();
        assert_eq!(back[1], f);
    }

    #[test]
    fn ragged_clip_rejected() {
        let a = Frame::zeros((4, 4, 3));
        let b = Frame::zeros((4, 5, 3));
        assert!(VideoClip::new(vec![a, b]).is_err());
        assert!(VideoClip::new(vec![]).is_err());
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::from_shape_fn((5, 7, 3), |(i, j, k)| ((i * 7 + j + k * 3) % 256) as f32 / 255.0);
        let clip = VideoClip::new(vec![f.clone(), f]).unwrap();
        write_clip_dir(&clip, dir.path()).unwrap();
        assert!(dir.path().join("frame_00002.png").exists());
        let back = read_clip_dir(dir.path()).unwrap();
        assert_eq!(back.frames, clip.frames);
    }

    #[test]
    fn pad_replicates_edges() {
        let f = Frame::from_shape_fn((3, 3, 1), |(i, j, _)| (i * 3 + j) as f32);
        let p = pad_to_multiple(&f, 4);
        assert_eq!(p.dim(), (4, 4, 1));
        assert_eq!(p[[3, 3, 0]], 8.0);
        assert_eq!(p[[0, 3, 0]], 2.0);
        assert_eq!(crop(&p, 3, 3), f);
    }
}
