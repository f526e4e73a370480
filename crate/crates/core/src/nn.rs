//! Parameter registry, the handful of layers the networks need, and Adam.
//!
//! Parameters are candle [`Var`]s registered under dotted names whose first
//! component is the parameter group (`unet_enc`, `vae_dec`, `capm_unet`...).
//! Groups are the unit of freezing: an optimizer only ever receives the vars
//! of trainable groups.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::{contract, Result};
use crate::rng::{gaussian_vec, seeded, Rng};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std `gain / sqrt(fan_in)`; fan-in is every dim but the first.
    FanIn(f64),
}

struct Registry {
    vars: BTreeMap<String, Var>,
    rng: Rng,
    dtype: DType,
    device: Device,
}

/// Shared handle used while constructing networks; cloning is cheap.
#[derive(Clone)]
pub struct ParamStore {
    reg: Arc<Mutex<Registry>>,
    prefix: String,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            reg: Arc::new(Mutex::new(Registry {
                vars: BTreeMap::new(),
                rng: seeded(seed),
                dtype,
                device,
            })),
            prefix: String::new(),
        }
    }

    /// A view that registers names under `prefix.name`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let name = name.as_ref();
        Self {
            reg: self.reg.clone(),
            prefix: if self.prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{}", self.prefix, name)
            },
        }
    }

    pub fn dtype(&self) -> DType {
        self.reg.lock().expect("registry lock").dtype
    }

    pub fn device(&self) -> Device {
        self.reg.lock().expect("registry lock").device.clone()
    }

    pub fn get<S: Into<candle_core::Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Var> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut reg = self.reg.lock().expect("registry lock");
        if let Some(v) = reg.vars.get(&full) {
            return Ok(v.clone());
        }
        let shape: candle_core::Shape = shape.into();
        let n = shape.elem_count();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c as f32; n],
            Init::Normal(std) => gaussian_vec(&mut reg.rng, n).into_iter().map(|v| v * std as f32).collect(),
            Init::FanIn(gain) => {
                let fan_in: usize = shape.dims().iter().skip(1).product::<usize>().max(1);
                let std = gain / (fan_in as f64).sqrt();
                gaussian_vec(&mut reg.rng, n).into_iter().map(|v| v * std as f32).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &reg.device)?.to_dtype(reg.dtype)?;
        let var = Var::from_tensor(&t)?;
        reg.vars.insert(full, var.clone());
        Ok(var)
    }

    /// All registered vars, sorted by name.
    pub fn all(&self) -> BTreeMap<String, Var> {
        self.reg.lock().expect("registry lock").vars.clone()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.reg.lock().expect("registry lock").vars.get(name).cloned()
    }

    /// Vars whose group (first name component) is in `groups`.
    pub fn in_groups(&self, groups: &BTreeSet<String>) -> Vec<(String, Var)> {
        self.all()
            .into_iter()
            .filter(|(name, _)| groups.contains(group_of(name)))
            .collect()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.all().keys().map(|n| group_of(n).to_string()).collect()
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// 2-D convolution on `N×C×H×W` with square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(ps, cin, cout, k, stride, Init::FanIn(1.0), Init::Zeros)
    }

    /// Weights and bias start at exactly zero.
    pub fn zeroed(ps: &ParamStore, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::with_init(ps, cin, cout, k, 1, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(ps: &ParamStore, cin: usize, cout: usize, k: usize, stride: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: ps.get((cout, cin, k, k), "weight", w)?,
            bias: ps.get(cout, "bias", b)?,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get((cout, cin), "weight", Init::FanIn(1.0))?,
            bias: ps.get(cout, "bias", Init::Zeros)?,
        })
    }

    pub fn with_init(ps: &ParamStore, cin: usize, cout: usize, w: Init) -> Result<Self> {
        Ok(Self {
            weight: ps.get((cout, cin), "weight", w)?,
            bias: ps.get(cout, "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Var,
    pub bias: Var,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let groups = [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            weight: ps.get(channels, "weight", Init::Ones)?,
            bias: ps.get(channels, "bias", Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(ps: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get(dim, "weight", Init::Ones)?,
            bias: ps.get(dim, "bias", Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dim, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Nearest-neighbour ×2 upsampling of `N×C×H×W`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// Sinusoidal embedding of integer timesteps, `N×dim`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), 2 * half), device)?.to_dtype(dtype)?)
}

/// Residual block: GN → SiLU → conv → (+ time) → GN → SiLU → conv, with a
/// 1×1 skip when the width changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(ps: &ParamStore, cin: usize, cout: usize, time_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&ps.pp("norm1"), cin)?,
            conv1: Conv2d::new(&ps.pp("conv1"), cin, cout, 3, 1)?,
            time: time_dim.map(|d| Linear::new(&ps.pp("time"), d, cout)).transpose()?,
            norm2: GroupNorm::new(&ps.pp("norm2"), cout)?,
            conv2: Conv2d::with_init(&ps.pp("conv2"), cout, cout, 3, 1, Init::FanIn(0.5), Init::Zeros)?,
            skip: (cin != cout).then(|| Conv2d::new(&ps.pp("skip"), cin, cout, 1, 1)).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(lin), Some(t)) = (&self.time, temb) {
            let e = lin.forward(&t.silu()?)?;
            let (n, c) = e.dims2()?;
            h = h.broadcast_add(&e.reshape((n, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((s + h)?)
    }
}

/// Single-head self-attention over the spatial positions of `N×C×H×W`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
}

impl SpatialAttention {
    pub fn new(ps: &ParamStore, c: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&ps.pp("norm"), c)?,
            qkv: Linear::new(&ps.pp("qkv"), c, 3 * c)?,
            proj: Linear::with_init(&ps.pp("proj"), c, c, Init::FanIn(0.5))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let out = self_attention(&tokens, &self.qkv, &self.proj, c)?;
        let out = out.transpose(1, 2)?.reshape((n, c, h, w))?;
        Ok((x + out)?)
    }
}

/// `tokens: B×L×C` → attention output `B×L×C` (single head).
pub fn self_attention(tokens: &Tensor, qkv: &Linear, proj: &Linear, c: usize) -> Result<Tensor> {
    let packed = qkv.forward(tokens)?;
    let q = packed.narrow(D::Minus1, 0, c)?.contiguous()?;
    let k = packed.narrow(D::Minus1, c, c)?.contiguous()?;
    let v = packed.narrow(D::Minus1, 2 * c, c)?.contiguous()?;
    let scores = (q.matmul(&k.t()?)? / (c as f64).sqrt())?;
    let attn = softmax_last(&scores)?;
    proj.forward(&attn.matmul(&v)?)
}

/// Mean absolute error as a differentiable scalar.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(contract(format!("l1 operands differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(abs0(&(a - b)?)?.mean_all()?)
}

/// `|x|` whose subgradient at zero is zero (candle's `abs` uses +1 there).
pub fn abs0(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&x.sign()?.detach())?)
}

pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(contract(format!("mse operands differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Adam with bias correction. Moments live in `f32`/the params' dtype and
/// are exported for checkpointing.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    step: u64,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, v) in &params {
            moments.insert(name.clone(), (v.zeros_like()?, v.zeros_like()?));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            step: 0,
            params,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let scale = match self.grad_clip {
            Some(max) => {
                let mut sq = 0.0f64;
                for (_, v) in &self.params {
                    if let Some(g) = grads.get(v) {
                        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            let g = g.affine(scale, 0.0)?;
            let (m, v) = self.moments.get(name).expect("moment per param");
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moments as named tensors plus the step counter.
    pub fn export(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.moments {
            out.push((format!("m.{name}"), m.clone()));
            out.push((format!("v.{name}"), v.clone()));
        }
        (self.step, out)
    }

    pub fn import(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in self.moments.iter_mut() {
            let m = tensors.get(&format!("m.{name}"));
            let v = tensors.get(&format!("v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => *slot = (m.clone(), v.clone()),
                _ => return Err(contract(format!("optimizer state lacks moments for {name}"))),
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_and_groups() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 0);
        let _ = Conv2d::new(&ps.pp("unet_enc").pp("conv_in"), 4, 8, 3, 1).unwrap();
        let _ = Linear::new(&ps.pp("dcm").pp("lin"), 4, 2).unwrap();
        let all = ps.all();
        assert!(all.contains_key("unet_enc.conv_in.weight"));
        assert!(all.contains_key("dcm.lin.bias"));
        assert_eq!(ps.groups().into_iter().collect::<Vec<_>>(), vec!["dcm", "unet_enc"]);
        let only: BTreeSet<String> = ["dcm".to_string()].into();
        assert_eq!(ps.in_groups(&only).len(), 2);
    }

    #[test]
    fn same_seed_same_init() {
        let a = ParamStore::new(DType::F32, Device::Cpu, 5);
        let b = ParamStore::new(DType::F32, Device::Cpu, 5);
        let ca = Conv2d::new(&a, 3, 4, 3, 1).unwrap();
        let cb = Conv2d::new(&b, 3, 4, 3, 1).unwrap();
        let va = ca.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = cb.weight.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn group_norm_normalises() {
        let ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        let gn = GroupNorm::new(&ps, 8).unwrap();
        let x = Tensor::arange(0f64, 2.0 * 8.0 * 9.0, &Device::Cpu).unwrap().reshape((2, 8, 3, 3)).unwrap();
        let y = gn.forward(&x).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let y = upsample2(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 1);
        let v = ps.get(3, "x", Init::Const(2.0)).unwrap();
        let mut opt = Adam::new(vec![("x".into(), v.clone())], 0.1).unwrap();
        for _ in 0..200 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let x = v.as_tensor().to_vec1::<f32>().unwrap();
        assert!(x.iter().all(|a| a.abs() < 0.05), "{x:?}");
    }

    #[test]
    fn adam_state_round_trips() {
        let ps = ParamStore::new(DType::F32, Device::Cpu, 1);
        let v = ps.get(2, "x", Init::Const(1.0)).unwrap();
        let mut opt = Adam::new(vec![("x".into(), v.clone())], 0.1).unwrap();
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let (step, state) = opt.export();
        let mut other = Adam::new(vec![("x".into(), v.clone())], 0.1).unwrap();
        other.import(step, &state.into_iter().collect()).unwrap();
        assert_eq!(other.step_count(), 1);
    }
}
