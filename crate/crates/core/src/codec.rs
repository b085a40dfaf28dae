//! Perceptual compression for segmentation maps.
//!
//! A small strided convolutional autoencoder stands in for a pretrained KL
//! autoencoder. The mask encoder `E` and decoder `D` are trained once by
//! [`pretrain_codec`] and then frozen; the condition encoder shares `E`'s
//! architecture, starts as an exact copy of it, and stays trainable.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, Conv2d, ParamSource, ParamStore};
use crate::raster::{BinaryMask, RgbImage};
use crate::schedule::{LatentGrid, LatentRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskChannelPolicy {
    /// The binary mask is copied into all three channels.
    Replicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    /// Width of the first encoder stage; later stages double it.
    pub base_channels: usize,
    pub mask_channel_policy: MaskChannelPolicy,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            downsample_factor: 8,
            latent_channels: 4,
            base_channels: 8,
            mask_channel_policy: MaskChannelPolicy::Replicate,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {f} must be a power of two"
            )));
        }
        if self.image_height % f != 0 || self.image_width % f != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by downsample factor {f}",
                self.image_height, self.image_width
            )));
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `[c, H/f, W/f]`
    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.latent_channels,
            self.image_height / self.downsample_factor,
            self.image_width / self.downsample_factor,
        ]
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }

    pub(crate) fn check_image(&self, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.image_height, self.image_width) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.image_height, self.image_width, 3],
                actual: vec![h, w, 3],
            });
        }
        Ok(())
    }
}

/// Added to the raw log-variance head so posteriors start narrow and the
/// decoder sees the mean signal from the first step.
const LOGVAR_OFFSET: f64 = -6.0;

/// Strided convolutional encoder producing a diagonal Gaussian over latents.
#[derive(Debug, Clone)]
pub struct Encoder {
    downs: Vec<Conv2d>,
    mid: Conv2d,
    head: Conv2d,
    latent_channels: usize,
}

impl Encoder {
    pub fn new(src: &mut ParamSource, cfg: &CodecConfig) -> Result<Self> {
        let mut downs = Vec::new();
        let mut in_ch = 3;
        for i in 0..cfg.stages() {
            let out = cfg.stage_channels(i + 1);
            downs.push(Conv2d::new(src, &format!("down.{i}"), in_ch, out, 3, 2)?);
            in_ch = out;
        }
        let mid = Conv2d::new(src, "mid", in_ch, in_ch, 3, 1)?;
        let head = Conv2d::new(src, "head", in_ch, 2 * cfg.latent_channels, 1, 1)?;
        Ok(Self {
            downs,
            mid,
            head,
            latent_channels: cfg.latent_channels,
        })
    }

    /// `[B, 3, H, W]` in `[0, 1]` to `(mean, logvar)`, each `[B, c, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.affine(2.0, -1.0)?;
        for conv in &self.downs {
            h = conv.forward(&h)?.silu()?;
        }
        let h = (&h + self.mid.forward(&h)?.silu()?)?;
        let out = self.head.forward(&h)?;
        let mean = out.narrow(1, 0, self.latent_channels)?;
        let logvar = (out.narrow(1, self.latent_channels, self.latent_channels)?
            + LOGVAR_OFFSET)?
            .clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    input: Conv2d,
    ups: Vec<Conv2d>,
    output: Conv2d,
    stages: usize,
}

impl Decoder {
    pub fn new(src: &mut ParamSource, cfg: &CodecConfig) -> Result<Self> {
        let stages = cfg.stages();
        let top = cfg.stage_channels(stages);
        let input = Conv2d::new(src, "input", cfg.latent_channels, top, 3, 1)?;
        let mut ups = Vec::new();
        let mut in_ch = top;
        for i in (1..stages).rev() {
            let out = cfg.stage_channels(i);
            ups.push(Conv2d::new(src, &format!("up.{i}"), in_ch, out, 3, 1)?);
            in_ch = out;
        }
        let output = Conv2d::new(src, "output", in_ch, 3, 3, 1)?;
        Ok(Self {
            input,
            ups,
            output,
            stages,
        })
    }

    /// `[B, c, h, w]` to `[B, 3, H, W]` in `(0, 1)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let up = |h: &Tensor| -> Result<Tensor> {
            let (_, _, hh, ww) = h.dims4()?;
            Ok(h.upsample_nearest2d(hh * 2, ww * 2)?)
        };
        let mut h = self.input.forward(z)?.silu()?;
        for conv in &self.ups {
            h = conv.forward(&up(&h)?)?.silu()?;
        }
        if self.stages > 0 {
            h = up(&h)?;
        }
        nn::sigmoid(&self.output.forward(&h)?)
    }
}

/// Codec weights. `encoder` and `decoder` are frozen after pretraining;
/// `condition` is the trainable image encoder.
#[derive(Debug, Clone)]
pub struct CodecParams {
    pub config: CodecConfig,
    pub encoder: ParamStore,
    pub decoder: ParamStore,
    pub condition: ParamStore,
    /// Multiplier taking encoder means to roughly unit variance.
    pub latent_scale: f64,
}

impl CodecParams {
    /// Fresh weights; `condition` is a copy of `encoder`.
    pub fn init(config: &CodecConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut encoder = ParamStore::new(dtype, device);
        Encoder::new(&mut ParamSource::seeded(&mut encoder, seed), config)?;
        let mut decoder = ParamStore::new(dtype, device);
        Decoder::new(
            &mut ParamSource::seeded(&mut decoder, seed.wrapping_add(1)),
            config,
        )?;
        let condition = encoder.deep_copy()?;
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            condition,
            latent_scale: 1.0,
        })
    }

    pub fn nets(&self) -> Result<CodecNets> {
        Ok(CodecNets {
            encoder: Encoder::new(&mut ParamSource::Existing(&self.encoder), &self.config)?,
            decoder: Decoder::new(&mut ParamSource::Existing(&self.decoder), &self.config)?,
            condition: Encoder::new(&mut ParamSource::Existing(&self.condition), &self.config)?,
            latent_scale: self.latent_scale,
            config: self.config.clone(),
            dtype: self.encoder.dtype(),
            device: self.encoder.device().clone(),
        })
    }

    /// Digest of the frozen `(E, D)` pair.
    pub fn frozen_digest(&self) -> Result<String> {
        Ok(format!(
            "{}:{}",
            self.encoder.digest()?,
            self.decoder.digest()?
        ))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            encoder: self.encoder.to_dtype(dtype)?,
            decoder: self.decoder.to_dtype(dtype)?,
            condition: self.condition.to_dtype(dtype)?,
            latent_scale: self.latent_scale,
        })
    }
}

/// Forward-ready networks sharing storage with a [`CodecParams`].
#[derive(Debug, Clone)]
pub struct CodecNets {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub condition: Encoder,
    pub latent_scale: f64,
    pub config: CodecConfig,
    pub dtype: DType,
    pub device: Device,
}

impl CodecNets {
    /// Batched `E`: deterministic (posterior mean), scaled, detached.
    pub fn encode_mask_batch(&self, maps: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.encoder.forward(maps)?;
        Ok((mean * self.latent_scale)?.detach())
    }

    /// Batched condition encoder; gradients flow into its parameters.
    pub fn encode_condition_batch(&self, images: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.condition.forward(images)?;
        Ok((mean * self.latent_scale)?)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decoder.forward(&(z / self.latent_scale)?)?.clamp(0.0, 1.0)?)
    }

    pub fn encode_mask(&self, map: &RgbImage) -> Result<LatentGrid> {
        self.config.check_image(map.height(), map.width())?;
        let x = map.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        LatentGrid::from_tensor(&self.encode_mask_batch(&x)?, LatentRole::CleanLatent)
    }

    pub fn encode_condition(&self, image: &RgbImage) -> Result<LatentGrid> {
        self.config.check_image(image.height(), image.width())?;
        let x = image.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        LatentGrid::from_tensor(
            &self.encode_condition_batch(&x)?.detach(),
            LatentRole::ConditionLatent,
        )
    }

    pub fn decode_latent(&self, z: &LatentGrid) -> Result<RgbImage> {
        if z.shape() != self.config.latent_shape() {
            return Err(Error::ShapeMismatch {
                expected: self.config.latent_shape().to_vec(),
                actual: z.shape().to_vec(),
            });
        }
        let t = z.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        RgbImage::from_tensor(&self.decode_batch(&t)?)
    }
}

/// Per pixel: channel mean at or above `threshold` is foreground.
pub fn binarize(image: &RgbImage, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(image.height(), image.width(), |r, c| {
        let [a, b, d] = image.pixel(r, c);
        (a as f64 + b as f64 + d as f64) / 3.0 >= threshold
    })
}

/// Batched [`binarize`] over a `[B, 3, H, W]` tensor.
pub fn binarize_batch(maps: &Tensor, threshold: f64) -> Result<Vec<BinaryMask>> {
    let (b, _, h, w) = maps.dims4()?;
    let means = maps
        .to_dtype(DType::F64)?
        .mean(1)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| {
            let plane = &means[i * h * w..(i + 1) * h * w];
            BinaryMask::new(h, w, plane.iter().map(|v| *v >= threshold).collect())
                .expect("plane matches shape")
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub holdout_fraction: f64,
    pub target_mae: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 2e-3,
            kl_weight: 1e-4,
            holdout_fraction: 0.2,
            target_mae: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub heldout_mae: f64,
    pub heldout_dice: f64,
    pub train_masks: usize,
    pub heldout_masks: usize,
    pub losses: Vec<f64>,
    pub latent_scale: f64,
}

pub const MIN_PRETRAIN_MASKS: usize = 32;

/// Trains `E` and `D` on binary masks with L1 reconstruction plus a small KL
/// penalty, then freezes them and copies `E` into the condition encoder.
pub fn pretrain_codec(
    masks: &[BinaryMask],
    config: &CodecConfig,
    pretrain: &PretrainConfig,
) -> Result<(CodecParams, PretrainReport)> {
    if masks.len() < MIN_PRETRAIN_MASKS {
        return Err(Error::Validation(format!(
            "codec pretraining needs at least {MIN_PRETRAIN_MASKS} masks, got {}",
            masks.len()
        )));
    }
    for m in masks {
        config.check_image(m.height(), m.width())?;
    }
    let device = Device::Cpu;
    let dtype = DType::F32;
    let mut rng = ChaCha8Rng::seed_from_u64(pretrain.seed);

    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((masks.len() as f64 * pretrain.holdout_fraction).round() as usize)
        .clamp(1, masks.len() - 1);
    let (held, train) = order.split_at(n_hold);

    let mut params = CodecParams::init(config, pretrain.seed, dtype, &device)?;
    let nets = params.nets()?;
    let mut named = Vec::new();
    for (prefix, store) in [("encoder", &params.encoder), ("decoder", &params.decoder)] {
        for (k, v) in store.iter() {
            named.push((format!("{prefix}.{k}"), v.clone()));
        }
    }
    let mut opt = crate::optim::AdamW::new(
        named,
        crate::optim::AdamWConfig {
            learning_rate: pretrain.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;

    let maps: Vec<Tensor> = masks
        .iter()
        .map(|m| m.to_map_tensor(dtype, &device))
        .collect::<Result<_>>()?;
    let stack = |idx: &[usize]| -> Result<Tensor> {
        let parts: Vec<&Tensor> = idx.iter().map(|i| &maps[*i]).collect();
        Ok(Tensor::stack(&parts, 0)?)
    };

    let mut losses = Vec::with_capacity(pretrain.steps);
    let mut cursor = train.len();
    let mut epoch_order = train.to_vec();
    for step in 0..pretrain.steps {
        let mut batch = Vec::with_capacity(pretrain.batch_size);
        while batch.len() < pretrain.batch_size {
            if cursor == epoch_order.len() {
                epoch_order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(epoch_order[cursor]);
            cursor += 1;
        }
        let x = stack(&batch)?;
        let (mean, logvar) = nets.encoder.forward(&x)?;
        let eps = nn::randn(&mut rng, mean.dims(), dtype, &device)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let recon = nets.decoder.forward(&z)?;
        let rec_loss = nn::l1_mean(&recon, &x)?;
        let kl = ((mean.sqr()? + logvar.exp()? - &logvar)? - 1.0)?
            .affine(0.5, 0.0)?
            .mean_all()?;
        let loss = (rec_loss + (kl * pretrain.kl_weight)?)?;
        let value = nn::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        opt.step(&loss.backward()?)?;
    }

    // Scale so that encoder means have unit standard deviation.
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for chunk in train.chunks(64) {
        let (mean, _) = nets.encoder.forward(&stack(chunk)?)?;
        let v = mean.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        count += v.len();
        sum += v.iter().sum::<f64>();
        sum_sq += v.iter().map(|x| x * x).sum::<f64>();
    }
    let mu = sum / count as f64;
    let std = (sum_sq / count as f64 - mu * mu).max(1e-12).sqrt();
    params.latent_scale = 1.0 / std;

    let nets = params.nets()?;
    let mut abs_err = 0.0;
    let mut n_px = 0usize;
    let mut dice_sum = 0.0;
    for chunk in held.chunks(64) {
        let x = stack(chunk)?;
        let recon = nets.decode_batch(&nets.encode_mask_batch(&x)?)?;
        abs_err += nn::scalar_f64(&(&recon - &x)?.abs()?.sum_all()?)?;
        n_px += x.elem_count();
        for (pred, i) in binarize_batch(&recon, 0.5)?.iter().zip(chunk) {
            dice_sum += metrics::dice(pred, &masks[*i])?;
        }
    }
    let report = PretrainReport {
        heldout_mae: abs_err / n_px as f64,
        heldout_dice: dice_sum / held.len() as f64,
        train_masks: train.len(),
        heldout_masks: held.len(),
        losses,
        latent_scale: params.latent_scale,
    };
    log::info!(
        "codec pretrain: held-out MAE {:.4}, Dice {:.4}, latent scale {:.3}",
        report.heldout_mae,
        report.heldout_dice,
        report.latent_scale
    );
    if report.heldout_mae > pretrain.target_mae {
        return Err(Error::NonConvergence {
            mae: report.heldout_mae,
            target: pretrain.target_mae,
        });
    }
    params.condition = params.encoder.deep_copy()?;
    Ok((params, report))
}
