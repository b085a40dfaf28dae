//! Conditional noise predictor: a small U-Net over the channel-wise
//! concatenation of the noisy latent and the condition latent, with a
//! sinusoidal timestep embedding added inside every residual block.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear, ParamSource, ParamStore};
use crate::schedule::{LatentGrid, LatentRole, DEFAULT_TIMESTEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub timestep_embedding_dim: usize,
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            depth: 2,
            timestep_embedding_dim: 64,
            timesteps: DEFAULT_TIMESTEPS,
        }
    }
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn output_channels(&self) -> usize {
        self.latent_channels
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.base_channels * (i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || self.timesteps == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.timestep_embedding_dim < 2 || self.timestep_embedding_dim % 2 != 0 {
            return Err(Error::Config(
                "timestep embedding dimension must be even and at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(
    timesteps: &[usize],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        values.extend(args.iter().map(|a| a.sin()));
        values.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(values, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(src: &mut ParamSource, name: &str, in_ch: usize, out_ch: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(src, &format!("{name}.norm1"), in_ch)?,
            conv1: Conv2d::new(src, &format!("{name}.conv1"), in_ch, out_ch, 3, 1)?,
            time: Linear::new(src, &format!("{name}.time"), temb, out_ch)?,
            norm2: GroupNorm::new(src, &format!("{name}.norm2"), out_ch)?,
            conv2: Conv2d::new(src, &format!("{name}.conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(src, &format!("{name}.skip"), in_ch, out_ch, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<ResBlock>,
    downsamples: Vec<Conv2d>,
    mid: ResBlock,
    upsamples: Vec<Conv2d>,
    up_blocks: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    dtype: DType,
    device: Device,
    calls: AtomicUsize,
}

impl Denoiser {
    pub fn new(src: &mut ParamSource, config: &DenoiserConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let e = config.timestep_embedding_dim;
        let time_in = Linear::new(src, "time.in", e, e)?;
        let time_out = Linear::new(src, "time.out", e, e)?;
        let c0 = config.stage_channels(0);
        let conv_in = Conv2d::new(src, "conv_in", config.input_channels(), c0, 3, 1)?;
        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        for i in 0..config.depth {
            let (ch, next) = (config.stage_channels(i), config.stage_channels(i + 1));
            down_blocks.push(ResBlock::new(src, &format!("down.{i}.res"), ch, ch, e)?);
            downsamples.push(Conv2d::new(src, &format!("down.{i}.pool"), ch, next, 3, 2)?);
        }
        let top = config.stage_channels(config.depth);
        let mid = ResBlock::new(src, "mid", top, top, e)?;
        let mut upsamples = Vec::new();
        let mut up_blocks = Vec::new();
        for i in (0..config.depth).rev() {
            let (ch, next) = (config.stage_channels(i), config.stage_channels(i + 1));
            upsamples.push(Conv2d::new(src, &format!("up.{i}.conv"), next, ch, 3, 1)?);
            up_blocks.push(ResBlock::new(src, &format!("up.{i}.res"), 2 * ch, ch, e)?);
        }
        let norm_out = GroupNorm::new(src, "norm_out", c0)?;
        let conv_out = Conv2d::new(src, "conv_out", c0, config.output_channels(), 3, 1)?;
        Ok(Self {
            config: config.clone(),
            time_in,
            time_out,
            conv_in,
            down_blocks,
            downsamples,
            mid,
            upsamples,
            up_blocks,
            norm_out,
            conv_out,
            dtype,
            device: device.clone(),
            calls: AtomicUsize::new(0),
        })
    }

    /// Builds the network over an existing parameter store.
    pub fn from_store(store: &ParamStore, config: &DenoiserConfig) -> Result<Self> {
        Self::new(
            &mut ParamSource::Existing(store),
            config,
            store.dtype(),
            store.device(),
        )
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Number of forward passes since construction.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Batched noise prediction. `z_t`, `z_c`: `[B, c, h, w]`; one timestep
    /// per batch element. Counts as a single call.
    pub fn forward(&self, z_t: &Tensor, z_c: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        if z_t.dims() != z_c.dims() {
            return Err(Error::ShapeMismatch {
                expected: z_t.dims().to_vec(),
                actual: z_c.dims().to_vec(),
            });
        }
        let (b, c, h, w) = z_t.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.config.latent_channels, h, w],
                actual: z_t.dims().to_vec(),
            });
        }
        let factor = 1usize << self.config.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "latent {h}x{w} not divisible by 2^depth = {factor}"
            )));
        }
        if timesteps.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![b],
                actual: vec![timesteps.len()],
            });
        }
        if let Some(&t) = timesteps.iter().find(|t| **t == 0 || **t > self.config.timesteps) {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.config.timesteps,
            });
        }
        self.calls.fetch_add(1, Ordering::SeqCst);

        let temb = timestep_embedding(
            timesteps,
            self.config.timestep_embedding_dim,
            self.dtype,
            &self.device,
        )?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(&Tensor::cat(&[z_t, z_c], 1)?)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for (block, down) in self.down_blocks.iter().zip(&self.downsamples) {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            h = down.forward(&h)?;
        }
        h = self.mid.forward(&h, &temb)?;
        for (up, block) in self.upsamples.iter().zip(&self.up_blocks) {
            let skip = skips.pop().expect("one skip per stage");
            let (_, _, sh, sw) = skip.dims4()?;
            h = up.forward(&h.upsample_nearest2d(sh, sw)?)?;
            h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }

    /// Single-sample noise prediction.
    pub fn predict_noise(&self, z_t: &LatentGrid, z_c: &LatentGrid, t: usize) -> Result<LatentGrid> {
        if z_t.shape() != z_c.shape() {
            return Err(Error::ShapeMismatch {
                expected: z_t.shape().to_vec(),
                actual: z_c.shape().to_vec(),
            });
        }
        let zt = z_t.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        let zc = z_c.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        let out = self.forward(&zt, &zc, &[t])?;
        LatentGrid::from_tensor(&out, LatentRole::PredictedNoise)
            .map_err(|_| Error::NonFinite("denoiser output".into()))
    }
}

/// Fresh denoiser parameters from a seed.
pub fn init_denoiser(config: &DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<ParamStore> {
    let mut store = ParamStore::new(dtype, device);
    Denoiser::new(&mut ParamSource::seeded(&mut store, seed), config, dtype, device)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig::default();
        let store = init_denoiser(&cfg, seed, DType::F32, &Device::Cpu).unwrap();
        Denoiser::from_store(&store, &cfg).unwrap()
    }

    fn grids(seed: u64) -> (LatentGrid, LatentGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            LatentGrid::standard_normal([4, 8, 8], &mut rng).with_role(LatentRole::NoisyLatent),
            LatentGrid::standard_normal([4, 8, 8], &mut rng).with_role(LatentRole::ConditionLatent),
        )
    }

    #[test]
    fn shape_and_determinism() {
        let f = net(0);
        let (zt, zc) = grids(1);
        let a = f.predict_noise(&zt, &zc, 50).unwrap();
        let b = f.predict_noise(&zt, &zc, 50).unwrap();
        assert_eq!(a.shape(), [4, 8, 8]);
        assert_eq!(a, b);
        assert_eq!(f.calls(), 2);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = DenoiserConfig::default();
        let d = |s| init_denoiser(&cfg, s, DType::F32, &Device::Cpu).unwrap().digest().unwrap();
        assert_eq!(d(7), d(7));
        assert_ne!(d(7), d(8));
    }

    #[test]
    fn init_output_is_in_sanity_band() {
        let f = net(3);
        let (zt, zc) = grids(4);
        let out = f.predict_noise(&zt, &zc, 500).unwrap();
        let v = out.values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!(std > 0.0 && std < 10.0, "std {std}");
    }

    #[test]
    fn responds_to_condition_and_timestep() {
        let f = net(5);
        let (zt, zc) = grids(6);
        let (_, zc2) = grids(7);
        let base = f.predict_noise(&zt, &zc, 100).unwrap();
        let other_c = f.predict_noise(&zt, &zc2, 100).unwrap();
        let other_t = f.predict_noise(&zt, &zc, 900).unwrap();
        let diff = |a: &LatentGrid, b: &LatentGrid| {
            a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>()
        };
        assert!(diff(&base, &other_c) > 0.0);
        assert!(diff(&base, &other_t) > 0.0);
    }

    #[test]
    fn validates_inputs() {
        let f = net(0);
        let (zt, zc) = grids(1);
        assert!(matches!(
            f.predict_noise(&zt, &zc, 0),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(f.predict_noise(&zt, &zc, 1001).is_err());
        let small = LatentGrid::zeros([4, 4, 4], LatentRole::ConditionLatent);
        assert!(matches!(
            f.predict_noise(&zt, &small, 10),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(&[0, 3], 4, DType::F64, &Device::Cpu)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 1.0, 1.0]);
        assert!((e[1][0] - 3f64.sin()).abs() < 1e-12);
        assert!((e[1][1] - (3.0 * 0.01f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn tiny_config_runs_in_f64() {
        let cfg = DenoiserConfig {
            base_channels: 4,
            depth: 1,
            ..Default::default()
        };
        let store = init_denoiser(&cfg, 0, DType::F64, &Device::Cpu).unwrap();
        let f = Denoiser::from_store(&store, &cfg).unwrap();
        let (zt, zc) = grids(2);
        assert_eq!(f.predict_noise(&zt, &zc, 10).unwrap().shape(), [4, 8, 8]);
    }
}
