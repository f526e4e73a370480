//! Bilinear backward warping with border replication.
//!
//! A flow field is an `h×w×2` array; channel 0 is the horizontal (column)
//! displacement and channel 1 the vertical one. Warping samples the source
//! at `p + flow(p)` for every output pixel `p`.

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3};

use crate::error::{contract, Result};
use crate::frame::Frame;

pub type FlowField = Array3<f32>;

pub fn zero_flow(h: usize, w: usize) -> FlowField {
    FlowField::zeros((h, w, 2))
}

/// The four bilinear taps of every output pixel, as flat source indices and
/// weights (row-major `h×w`).
#[derive(Debug, Clone)]
pub struct BilinearTaps {
    pub h: usize,
    pub w: usize,
    pub index: [Vec<u32>; 4],
    pub weight: [Vec<f32>; 4],
}

impl BilinearTaps {
    pub fn new(flow: &FlowField) -> Self {
        let (h, w, _) = flow.dim();
        let n = h * w;
        let mut index: [Vec<u32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        let mut weight: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        for i in 0..h {
            for j in 0..w {
                let sx = (j as f32 + flow[[i, j, 0]]).clamp(0.0, (w - 1) as f32);
                let sy = (i as f32 + flow[[i, j, 1]]).clamp(0.0, (h - 1) as f32);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f32;
                let fy = sy - y0 as f32;
                let taps = [
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ];
                for (k, (idx, wt)) in taps.into_iter().enumerate() {
                    index[k].push(idx as u32);
                    weight[k].push(wt);
                }
            }
        }
        Self { h, w, index, weight }
    }

    pub fn apply_plane(&self, src: &[f32]) -> Vec<f32> {
        (0..self.h * self.w)
            .map(|p| {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    let wt = self.weight[k][p];
                    if wt != 0.0 {
                        acc += wt * src[self.index[k][p] as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

pub fn warp_plane(plane: &Array2<f32>, flow: &FlowField) -> Result<Array2<f32>> {
    let (h, w) = plane.dim();
    if flow.dim() != (h, w, 2) {
        return Err(contract(format!("flow {:?} does not match plane {h}x{w}", flow.dim())));
    }
    let src: Vec<f32> = plane.iter().copied().collect();
    let out = BilinearTaps::new(flow).apply_plane(&src);
    Ok(Array2::from_shape_vec((h, w), out).expect("tap count equals pixel count"))
}

pub fn warp_frame(frame: &Frame, flow: &FlowField) -> Result<Frame> {
    let (h, w, c) = frame.dim();
    if flow.dim() != (h, w, 2) {
        return Err(contract(format!("flow {:?} does not match frame {h}x{w}", flow.dim())));
    }
    let taps = BilinearTaps::new(flow);
    let mut out = Frame::zeros((h, w, c));
    for k in 0..c {
        let src: Vec<f32> = frame.index_axis(ndarray::Axis(2), k).iter().copied().collect();
        let warped = taps.apply_plane(&src);
        for (p, v) in warped.into_iter().enumerate() {
            out[[p / w, p % w, k]] = v;
        }
    }
    Ok(out)
}

/// Differentiable warp of a `C×H×W` tensor (gradients flow to `z`; the flow
/// is a constant).
pub fn warp_tensor(z: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (c, h, w) = z.dims3()?;
    if flow.dim() != (h, w, 2) {
        return Err(contract(format!("flow {:?} does not match latent {h}x{w}", flow.dim())));
    }
    let taps = BilinearTaps::new(flow);
    let dev: &Device = z.device();
    let flat = z.reshape((c, h * w))?;
    let mut out: Option<Tensor> = None;
    for k in 0..4 {
        let idx = Tensor::from_slice(&taps.index[k], h * w, dev)?;
        let wt = Tensor::from_slice(&taps.weight[k], (1, h * w), dev)?.to_dtype(z.dtype())?;
        let term = flat.index_select(&idx, 1)?.broadcast_mul(&wt)?;
        out = Some(match out {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(out.expect("four taps").reshape((c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Var};

    fn ramp(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f32 * 0.1)
    }

    #[test]
    fn zero_flow_is_identity() {
        let p = ramp(5, 7);
        assert_eq!(warp_plane(&p, &zero_flow(5, 7)).unwrap(), p);
    }

    #[test]
    fn unit_shift_replicates_border() {
        let p = ramp(4, 6);
        let mut f = zero_flow(4, 6);
        f.index_axis_mut(ndarray::Axis(2), 0).fill(1.0);
        let out = warp_plane(&p, &f).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(out[[i, j]], p[[i, (j + 1).min(5)]]);
            }
        }
    }

    #[test]
    fn tensor_and_array_paths_agree() {
        let h = 5;
        let w = 6;
        let frame = Frame::from_shape_fn((h, w, 2), |(i, j, k)| ((i * 13 + j * 7 + k * 3) % 11) as f32);
        let flow = FlowField::from_shape_fn((h, w, 2), |(i, j, k)| ((i + 2 * j + k) % 5) as f32 * 0.37 - 0.8);
        let a = warp_frame(&frame, &flow).unwrap();
        let t = crate::frame::frames_to_tensor(&[frame], DType::F32, &Device::Cpu).unwrap();
        let b = warp_tensor(&t.get(0).unwrap(), &flow).unwrap();
        let b = crate::frame::tensor_to_frames(&b.unsqueeze(0).unwrap()).unwrap().remove(0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn l1_of_warp_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let (h, w) = (4, 4);
        let z0: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37 % 23) as f64) * 0.11 - 1.0).collect();
        let target: Vec<f64> = (0..2 * h * w).map(|i| ((i * 17 % 19) as f64) * 0.09 - 0.7).collect();
        let flow = FlowField::from_shape_fn((h, w, 2), |(i, j, k)| 0.3 + 0.21 * ((i + j + k) % 3) as f32);
        let c = Tensor::from_vec(target, (2, h, w), &dev).unwrap();
        let energy = |z: &Tensor| (warp_tensor(z, &flow).unwrap() - &c).unwrap().abs().unwrap().sum_all().unwrap();
        let var = Var::from_tensor(&Tensor::from_vec(z0.clone(), (2, h, w), &dev).unwrap()).unwrap();
        let g = energy(var.as_tensor()).backward().unwrap();
        let g = g.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..z0.len() {
            let eval = |d: f64| {
                let mut v = z0.clone();
                v[i] += d;
                energy(&Tensor::from_vec(v, (2, h, w), &dev).unwrap()).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "i={i}: fd={fd} ad={}", g[i]);
        }
    }
}
