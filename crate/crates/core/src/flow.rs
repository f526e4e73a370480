//! Dense optical flow: a coarse-to-fine combined local-global estimator
//! (Lucas–Kanade structure tensor inside a Horn–Schunck smoothness
//! functional), solved with pointwise-coupled Jacobi sweeps and incremental
//! warping at every pyramid level.
//!
//! `estimate_flow(a, b)` returns `d` such that `a(p) ≈ b(p + d(p))`, so
//! `warp(b, d)` aligns `b` onto `a`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::frame::{mean_channel, Frame};
use crate::resize::resize_plane;
use crate::warp::{warp_plane, FlowField};

/// Smallest pyramid level side; coarser levels are not built.
const MIN_LEVEL_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    /// Jacobi sweeps per warp.
    pub iterations: usize,
    pub warps: usize,
    /// Smoothness weight.
    pub alpha: f32,
    /// Gaussian σ of the structure-tensor window.
    pub rho: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            iterations: 80,
            warps: 4,
            alpha: 2e-3,
            rho: 1.0,
        }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f32> = (-r..=r).map(|x| (-(x * x) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(p: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    let (h, w) = p.dim();
    let r = (kernel.len() / 2) as i64;
    let tmp = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, k)| k * p[[i, (j as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(t, k)| k * tmp[[(i as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize, j]])
            .sum::<f32>()
    })
}

/// Fourth-order central differences with replicated borders.
fn gradients(p: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = p.dim();
    let at = |i: i64, j: i64| p[[i.clamp(0, h as i64 - 1) as usize, j.clamp(0, w as i64 - 1) as usize]];
    let gx = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as i64, j as i64);
        (at(i, j - 2) - 8.0 * at(i, j - 1) + 8.0 * at(i, j + 1) - at(i, j + 2)) / 12.0
    });
    let gy = Array2::from_shape_fn((h, w), |(i, j)| {
        let (i, j) = (i as i64, j as i64);
        (at(i - 2, j) - 8.0 * at(i - 1, j) + 8.0 * at(i + 1, j) - at(i + 2, j)) / 12.0
    });
    (gx, gy)
}

fn neighbour_mean(p: &Array2<f32>) -> Array2<f32> {
    let (h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let up = p[[i.saturating_sub(1), j]];
        let down = p[[(i + 1).min(h - 1), j]];
        let left = p[[i, j.saturating_sub(1)]];
        let right = p[[i, (j + 1).min(w - 1)]];
        0.25 * (up + down + left + right)
    })
}

fn resize_flow(flow: &FlowField, h: usize, w: usize) -> FlowField {
    let (fh, fw, _) = flow.dim();
    let sx = w as f32 / fw as f32;
    let sy = h as f32 / fh as f32;
    let u = resize_plane(&flow.index_axis(Axis(2), 0).to_owned(), h, w).mapv(|v| v * sx);
    let v = resize_plane(&flow.index_axis(Axis(2), 1).to_owned(), h, w).mapv(|v| v * sy);
    ndarray::stack(Axis(2), &[u.view(), v.view()]).expect("equal plane shapes")
}

fn refine_level(a: &Array2<f32>, b: &Array2<f32>, flow: &mut FlowField, params: &FlowParams) -> Result<()> {
    let (h, w) = a.dim();
    let window = gaussian_kernel(params.rho);
    let alpha = params.alpha;
    for _ in 0..params.warps {
        let bw = warp_plane(b, flow)?;
        let mid = (a + &bw) * 0.5;
        let (ix, iy) = gradients(&mid);
        let u0 = flow.index_axis(Axis(2), 0).to_owned();
        let v0 = flow.index_axis(Axis(2), 1).to_owned();
        // Data term linearised around the current flow, written in the total
        // flow: ix·u + iy·v + it' = 0.
        let it = Array2::from_shape_fn((h, w), |(i, j)| {
            bw[[i, j]] - a[[i, j]] - ix[[i, j]] * u0[[i, j]] - iy[[i, j]] * v0[[i, j]]
        });
        let j11 = blur(&(&ix * &ix), &window);
        let j12 = blur(&(&ix * &iy), &window);
        let j22 = blur(&(&iy * &iy), &window);
        let j13 = blur(&(&ix * &it), &window);
        let j23 = blur(&(&iy * &it), &window);
        let mut u = u0;
        let mut v = v0;
        for _ in 0..params.iterations {
            let ub = neighbour_mean(&u);
            let vb = neighbour_mean(&v);
            for i in 0..h {
                for j in 0..w {
                    let a11 = alpha + j11[[i, j]];
                    let a12 = j12[[i, j]];
                    let a22 = alpha + j22[[i, j]];
                    let r1 = alpha * ub[[i, j]] - j13[[i, j]];
                    let r2 = alpha * vb[[i, j]] - j23[[i, j]];
                    let det = a11 * a22 - a12 * a12;
                    u[[i, j]] = (a22 * r1 - a12 * r2) / det;
                    v[[i, j]] = (a11 * r2 - a12 * r1) / det;
                }
            }
        }
        flow.index_axis_mut(Axis(2), 0).assign(&u);
        flow.index_axis_mut(Axis(2), 1).assign(&v);
    }
    Ok(())
}

/// Flow between two planes of equal size.
pub fn estimate_flow(a: &Array2<f32>, b: &Array2<f32>, params: &FlowParams) -> Result<FlowField> {
    if a.dim() != b.dim() {
        return Err(contract(format!("flow inputs differ in size: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return Err(contract("flow inputs are empty"));
    }
    let mut pyramid = vec![(a.clone(), b.clone())];
    while pyramid.len() < params.pyramid_levels.max(1) {
        let (pa, pb) = pyramid.last().expect("non-empty");
        let (ph, pw) = pa.dim();
        if ph / 2 < MIN_LEVEL_SIDE || pw / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let next = (resize_plane(pa, ph / 2, pw / 2), resize_plane(pb, ph / 2, pw / 2));
        pyramid.push(next);
    }
    let (ch, cw) = pyramid.last().expect("non-empty").0.dim();
    let mut flow = FlowField::zeros((ch, cw, 2));
    for (level, (pa, pb)) in pyramid.iter().enumerate().rev() {
        let (lh, lw) = pa.dim();
        if flow.dim() != (lh, lw, 2) {
            flow = resize_flow(&flow, lh, lw);
        }
        refine_level(pa, pb, &mut flow, params)?;
        log::trace!("flow level {level} ({lh}x{lw}) refined");
    }
    if flow.iter().any(|v| !v.is_finite()) {
        return Err(contract("flow estimate is not finite"));
    }
    Ok(flow)
}

/// Flow between two frames, reduced to their channel mean.
pub fn estimate_flow_frames(a: &Frame, b: &Frame, params: &FlowParams) -> Result<FlowField> {
    estimate_flow(&mean_channel(a), &mean_channel(b), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn texture(h: usize, w: usize, dx: f32, dy: f32) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let x = j as f32 - dx;
            let y = i as f32 - dy;
            0.5 + 0.18 * (0.45 * x + 0.2 * y).sin() + 0.15 * (0.33 * y - 0.12 * x).cos() + 0.1 * (0.7 * x).sin() * (0.6 * y).cos()
        })
    }

    #[test]
    fn identical_inputs_give_zero_flow() {
        let a = texture(24, 20, 0.0, 0.0);
        let f = estimate_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(f.iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn constant_inputs_give_zero_flow() {
        let a = Array2::from_elem((16, 16), 0.3f32);
        let b = Array2::from_elem((16, 16), 0.6f32);
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        assert!(f.iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn recovers_integer_shift() {
        // b is a shifted right by two pixels with replicated border.
        let a = texture(32, 32, 0.0, 0.0);
        let b = Array2::from_shape_fn((32, 32), |(i, j)| a[[i, j.saturating_sub(2)]]);
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        let mut err = 0.0;
        for i in 4..28 {
            for j in 4..28 {
                err += (f[[i, j, 0]] - 2.0).abs() + f[[i, j, 1]].abs();
            }
        }
        let mae = err / (24.0 * 24.0 * 2.0);
        assert!(mae < 0.25, "mae {mae}");
    }

    #[test]
    fn tiny_inputs_use_a_single_level() {
        let a = texture(6, 5, 0.0, 0.0);
        let b = texture(6, 5, 0.5, 0.0);
        let f = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
        assert_eq!(f.dim(), (6, 5, 2));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let a = Array2::<f32>::zeros((8, 8));
        let b = Array2::<f32>::zeros((8, 9));
        assert!(estimate_flow(&a, &b, &FlowParams::default()).is_err());
    }
}
