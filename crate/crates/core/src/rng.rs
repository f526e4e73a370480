//! Seeded randomness. Every stochastic draw in the crate goes through a
//! `ChaCha8Rng` so runs are reproducible bit-for-bit.

use candle_core::{DType, Device, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable child seed for a named sub-stream (stage, step, clip...).
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Unit-Gaussian tensor of the given shape.
pub fn gaussian<S: Into<Shape>>(rng: &mut Rng, shape: S, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let shape = shape.into();
    let data = gaussian_vec(rng, shape.elem_count());
    Tensor::from_vec(data, shape, device)?.to_dtype(dtype)
}
