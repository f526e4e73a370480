//! Separable bicubic resampling (Keys kernel, a = -0.5) with kernel widening
//! when shrinking, edge-replicating borders.

use ndarray::Array2;

use crate::error::{contract, Result};
use crate::frame::{Frame, VideoClip};

pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample taps `(source index, weight)` along one axis.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    // Widen the kernel by the shrink factor so decimation is antialiased.
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((center - j as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as i64 - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

/// Resize a frame to `out_h × out_w`.
pub fn resize_bicubic(frame: &Frame, out_h: usize, out_w: usize) -> Frame {
    let (h, w, c) = frame.dim();
    if (h, w) == (out_h, out_w) {
        return frame.clone();
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut tmp = ndarray::Array3::<f64>::zeros((h, out_w, c));
    for i in 0..h {
        for (j, taps) in cols.iter().enumerate() {
            for k in 0..c {
                tmp[[i, j, k]] = taps.iter().map(|&(s, wt)| wt * frame[[i, s, k]] as f64).sum();
            }
        }
    }
    Frame::from_shape_fn((out_h, out_w, c), |(i, j, k)| {
        rows[i].iter().map(|&(s, wt)| wt * tmp[[s, j, k]]).sum::<f64>() as f32
    })
}

/// Resize a single plane (used by the flow pyramid and metrics).
pub fn resize_plane(plane: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let f = plane.clone().insert_axis(ndarray::Axis(2));
    resize_bicubic(&f, out_h, out_w).index_axis_move(ndarray::Axis(2), 0)
}

/// Bicubic decimation of every frame by an integer factor.
pub fn downsample(clip: &VideoClip, factor: usize) -> Result<VideoClip> {
    if factor == 0 {
        return Err(contract("down-sampling factor must be >= 1"));
    }
    let (h, w, _) = clip.dims();
    if h % factor != 0 || w % factor != 0 {
        let ph = h.div_ceil(factor) * factor - h;
        let pw = w.div_ceil(factor) * factor - w;
        return Err(contract(format!(
            "{h}x{w} is not divisible by {factor}; pad by {ph} rows and {pw} columns"
        )));
    }
    if factor == 1 {
        return Ok(clip.clone());
    }
    clip.map_frames(|f| Ok(downsample_frame(f, factor)))
}

pub fn downsample_frame(frame: &Frame, factor: usize) -> Frame {
    let (h, w, _) = frame.dim();
    resize_bicubic(frame, h / factor, w / factor)
}

pub fn upsample_frame(frame: &Frame, factor: usize) -> Frame {
    let (h, w, _) = frame.dim();
    resize_bicubic(frame, h * factor, w * factor).mapv(|v| v.clamp(0.0, 1.0))
}

/// `factor×factor` box average followed by nearest-neighbour replication.
pub fn box_degrade(frame: &Frame, factor: usize) -> Frame {
    let (h, w, c) = frame.dim();
    let (bh, bw) = (h / factor, w / factor);
    let mut small = ndarray::Array3::<f64>::zeros((bh, bw, c));
    for i in 0..bh * factor {
        for j in 0..bw * factor {
            for k in 0..c {
                small[[i / factor, j / factor, k]] += frame[[i, j, k]] as f64;
            }
        }
    }
    let n = (factor * factor) as f64;
    Frame::from_shape_fn((h, w, c), |(i, j, k)| {
        (small[[(i / factor).min(bh - 1), (j / factor).min(bw - 1), k]] / n) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_interpolates_at_integers() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        let s: f64 = (-2..=2).map(|k| cubic(k as f64 + 0.3)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_frames_stay_constant() {
        let f = Frame::from_elem((16, 12, 3), 0.37);
        for factor in [2, 4] {
            let d = downsample_frame(&f, factor);
            assert!(d.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
        let u = upsample_frame(&f, 4);
        assert!(u.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn factor_one_is_identity() {
        let f = Frame::from_shape_fn((6, 6, 3), |(i, j, k)| ((i * 31 + j * 7 + k) % 17) as f32 / 17.0);
        let clip = VideoClip::new(vec![f.clone()]).unwrap();
        assert_eq!(downsample(&clip, 1).unwrap(), clip);
    }

    #[test]
    fn indivisible_dims_report_padding() {
        let clip = VideoClip::new(vec![Frame::zeros((10, 12, 3))]).unwrap();
        let e = downsample(&clip, 4).unwrap_err().to_string();
        assert!(e.contains("pad by 2 rows and 0 columns"), "{e}");
    }

    /// Direct 2-D evaluation of the widened kernel, written independently of
    /// the separable implementation.
    fn direct_oracle(src: &Frame, factor: usize) -> Frame {
        let (h, w, c) = src.dim();
        let f = factor as f64;
        Frame::from_shape_fn((h / factor, w / factor, c), |(oi, oj, k)| {
            let cy = (oi as f64 + 0.5) * f - 0.5;
            let cx = (oj as f64 + 0.5) * f - 0.5;
            let (mut acc, mut norm) = (0.0, 0.0);
            for y in -20i64..(h as i64 + 20) {
                for x in -20i64..(w as i64 + 20) {
                    let wt = cubic((cy - y as f64) / f) * cubic((cx - x as f64) / f);
                    if wt == 0.0 {
                        continue;
                    }
                    let sy = y.clamp(0, h as i64 - 1) as usize;
                    let sx = x.clamp(0, w as i64 - 1) as usize;
                    acc += wt * src[[sy, sx, k]] as f64;
                    norm += wt;
                }
            }
            (acc / norm) as f32
        })
    }

    #[test]
    fn ramp_matches_direct_convolution() {
        let ramp = Frame::from_shape_fn((8, 8, 1), |(i, j, _)| (i * 8 + j) as f32 / 63.0);
        let got = downsample_frame(&ramp, 4);
        let want = direct_oracle(&ramp, 4);
        assert_eq!(got.dim(), (2, 2, 1));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn box_degrade_of_constant_block() {
        let f = Frame::from_shape_fn((4, 4, 1), |(i, j, _)| if i < 2 && j < 2 { 1.0 } else { 0.0 });
        let b = box_degrade(&f, 4);
        assert!(b.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
