//! Minimal layer toolkit on top of `candle_core`: a named parameter store with
//! seeded initialization, a handful of layers, and content digests.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named parameters, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn from_tensors(
        tensors: BTreeMap<String, Tensor>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut store = Self::new(dtype, device);
        for (name, t) in tensors {
            let t = t.to_device(device)?.to_dtype(dtype)?;
            store.vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Detached copies of the current values.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// A store with fresh storage; later updates to either side stay local.
    pub fn deep_copy(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, &self.device);
        for (name, v) in &self.vars {
            // `copy` forces new storage even when the dtype is unchanged.
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            out.vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(out)
    }

    pub fn digest(&self) -> Result<String> {
        digest_tensors(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if var.dims() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: var.dims().to_vec(),
            });
        }
        Ok(var.as_tensor().clone())
    }
}

/// SHA-256 over names, shapes and little-endian values.
pub fn digest_tensors<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

/// Where layer constructors obtain their parameters: freshly initialized from
/// a seeded stream, or looked up in an existing store.
pub enum ParamSource<'a> {
    Seeded {
        store: &'a mut ParamStore,
        rng: ChaCha8Rng,
    },
    Existing(&'a ParamStore),
}

impl<'a> ParamSource<'a> {
    pub fn seeded(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamSource::Seeded {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match self {
            ParamSource::Existing(store) => store.tensor(name, shape),
            ParamSource::Seeded { store, rng } => {
                if store.vars.contains_key(name) {
                    return Err(Error::Config(format!("duplicate parameter {name}")));
                }
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Const(c) => vec![c; n],
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                let t = Tensor::from_vec(values, shape, &store.device)?.to_dtype(store.dtype)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                store.vars.insert(name.to_string(), var);
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        src: &mut ParamSource,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = src.get(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::FanIn(fan_in),
        )?;
        let bias = src.get(&format!("{name}.bias"), &[out_ch], Init::FanIn(fan_in))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// Convolution as patch extraction plus one batched matrix product. The
    /// backward pass of this form is much cheaper on CPU than the native
    /// convolution's.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out_ch, _, k, _) = self.weight.dims4()?;
        let (s, p) = (self.stride, self.padding);
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        let cols = if k == 1 && s == 1 {
            x.reshape((b, c, h * w))?
        } else if s == 1 {
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut patches = Vec::with_capacity(k * k);
            for dy in 0..k {
                for dx in 0..k {
                    patches.push(xp.narrow(2, dy, oh)?.narrow(3, dx, ow)?.unsqueeze(2)?);
                }
            }
            Tensor::cat(&patches, 2)?.reshape((b, c * k * k, oh * ow))?
        } else {
            // Gather from the flattened input; index `h * w` is a zero pad.
            let mut idx = Vec::with_capacity(k * k * oh * ow);
            for dy in 0..k {
                for dx in 0..k {
                    for i in 0..oh {
                        for j in 0..ow {
                            let r = (i * s + dy) as isize - p as isize;
                            let q = (j * s + dx) as isize - p as isize;
                            let inside = r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w;
                            idx.push(if inside { r as usize * w + q as usize } else { h * w } as u32);
                        }
                    }
                }
            }
            let idx = Tensor::from_vec(idx, k * k * oh * ow, x.device())?;
            let flat = x.reshape((b, c, h * w))?;
            let zero = Tensor::zeros((b, c, 1), x.dtype(), x.device())?;
            Tensor::cat(&[&flat, &zero], 2)?
                .index_select(&idx, 2)?
                .reshape((b, c * k * k, oh * ow))?
        };
        // The batched product mishandles a stride-0 batch dimension, so the
        // broadcast weight is materialised.
        let wm = self
            .weight
            .reshape((out_ch, c * k * k))?
            .broadcast_left(b)?
            .contiguous()?;
        let y = wm.matmul(&cols)?.reshape((b, out_ch, oh, ow))?;
        let bias = self.bias.reshape((1, out_ch, 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(src: &mut ParamSource, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = src.get(
            &format!("{name}.weight"),
            &[out_dim, in_dim],
            Init::FanIn(in_dim),
        )?;
        let bias = src.get(&format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(src: &mut ParamSource, name: &str, channels: usize) -> Result<Self> {
        let weight = src.get(&format!("{name}.weight"), &[channels], Init::Const(1.0))?;
        let bias = src.get(&format!("{name}.bias"), &[channels], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            groups: group_count(channels),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let grouped = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let weight = self.weight.reshape((1, c, 1, 1))?;
        let bias = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&weight)?.broadcast_add(&bias)?)
    }
}

/// Largest divisor of `channels` not above 8.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Logistic function via `tanh`, whose gradient stays finite for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Mean absolute difference over every element.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Standard normal tensor drawn from `rng`, independent of the tensor backend.
pub fn randn<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
