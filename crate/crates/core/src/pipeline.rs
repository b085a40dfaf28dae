//! Training of the condition encoder and denoiser, and single-step or
//! multi-step inference.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{binarize_batch, CodecNets, CodecParams};
use crate::denoiser::{init_denoiser, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::raster::{BinaryMask, RgbImage};
use crate::schedule::{
    combined_loss, sample_timestep, LossBreakdown, NoiseSchedule, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_TIMESTEPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the latent loss.
    pub lambda: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
    pub vision_encoder_trainable: bool,
    /// Absolute loss above which training is declared diverged.
    pub divergence_limit: f64,
    pub output: OutputParameterization,
    pub denoiser: DenoiserConfig,
}

/// What the U-Net head regresses. The model always yields a noise estimate
/// `ñ`; with `CleanLatent` the head predicts a clean latent `h` and
/// `ñ = (z_t - sqrt(ᾱ_t) h) / sqrt(1 - ᾱ_t)`, so the direct latent estimate
/// equals `h` without the `1 / sqrt(ᾱ_t)` amplification of noise errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputParameterization {
    Noise,
    #[default]
    CleanLatent,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            lambda: 1.0,
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            seed: 0,
            vision_encoder_trainable: true,
            divergence_limit: 1e3,
            output: OutputParameterization::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config(
                "learning rate must be positive and lambda non-negative".into(),
            ));
        }
        if self.denoiser.timesteps != self.timesteps {
            return Err(Error::Config(format!(
                "denoiser embeds {} timesteps but the schedule has {}",
                self.denoiser.timesteps, self.timesteps
            )));
        }
        self.denoiser.validate()?;
        self.schedule().map(|_| ())
    }
}

/// How the starting noisy latent is drawn at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseInit {
    /// `z_t ~ N(0, I)`.
    UnitVariance,
    /// `z_t = sqrt(1 - alpha_bar_t) * n`, the noise part of the marginal at `t`.
    MarginalScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    SingleStep,
    MultiStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub t_fix: usize,
    pub multi_step_count: usize,
    /// First timestep of the multi-step ladder; the schedule length if unset.
    pub multi_step_start: Option<usize>,
    pub noise_seed: u64,
    pub noise_init: NoiseInit,
    pub binarize_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::SingleStep,
            t_fix: 50,
            multi_step_count: 50,
            multi_step_start: None,
            noise_seed: 0,
            noise_init: NoiseInit::UnitVariance,
            binarize_threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn multi_step() -> Self {
        Self {
            mode: InferenceMode::MultiStep,
            ..Self::default()
        }
    }

    /// Timesteps visited, in order.
    pub fn timesteps(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        match self.mode {
            InferenceMode::SingleStep => {
                schedule.check_timestep(self.t_fix)?;
                Ok(vec![self.t_fix])
            }
            InferenceMode::MultiStep => {
                let start = self.multi_step_start.unwrap_or(schedule.timesteps());
                schedule.check_timestep(start)?;
                ladder(start, self.multi_step_count)
            }
        }
    }
}

/// `count` evenly strided timesteps descending from `start`.
pub fn ladder(start: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > start {
        return Err(Error::Config(format!(
            "cannot place {count} steps below timestep {start}"
        )));
    }
    Ok((0..count)
        .map(|k| start - ((k * start) as f64 / count as f64).round() as usize)
        .collect())
}

/// Everything needed to segment: codec, condition encoder, denoiser.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub codec: CodecParams,
    pub denoiser: ParamStore,
    pub training: TrainingConfig,
}

impl SegModel {
    pub fn segmenter(&self) -> Result<Segmenter> {
        Segmenter::new(self)
    }
}

/// Noise estimate `ñ` for a batch, whatever the network head regresses.
pub fn predict_noise(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    output: OutputParameterization,
    z_t: &Tensor,
    z_c: &Tensor,
    timesteps: &[usize],
) -> Result<Tensor> {
    let h = denoiser.forward(z_t, z_c, timesteps)?;
    match output {
        OutputParameterization::Noise => Ok(h),
        OutputParameterization::CleanLatent => {
            let (signal, sigma) = schedule.coefficient_tensors(timesteps, z_t.dtype(), z_t.device())?;
            Ok((z_t - h.broadcast_mul(&signal)?)?.broadcast_div(&sigma)?)
        }
    }
}

/// Per-step deterministic randomness, so a resumed run replays the same
/// batches, timesteps and noise.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

pub struct Trainer {
    config: TrainingConfig,
    codec: CodecParams,
    nets: CodecNets,
    denoiser_store: ParamStore,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    optimizer: AdamW,
    step: usize,
    images: Tensor,
    clean_latents: Tensor,
    log: Vec<LossBreakdown>,
}

impl Trainer {
    /// Fresh denoiser; the condition encoder starts from `codec.condition`.
    pub fn new(codec: &CodecParams, config: TrainingConfig, images: &[RgbImage], masks: &[BinaryMask]) -> Result<Self> {
        config.validate()?;
        let denoiser_store =
            init_denoiser(&config.denoiser, config.seed, DType::F32, &Device::Cpu)?;
        let codec = CodecParams {
            condition: codec.condition.deep_copy()?,
            ..codec.clone()
        };
        Self::assemble(codec, denoiser_store, config, images, masks, None)
    }

    /// Continues from a saved model and optimizer state.
    pub fn resume(
        model: &SegModel,
        optimizer_state: &std::collections::BTreeMap<String, Tensor>,
        step: usize,
        images: &[RgbImage],
        masks: &[BinaryMask],
    ) -> Result<Self> {
        let codec = CodecParams {
            condition: model.codec.condition.deep_copy()?,
            ..model.codec.clone()
        };
        Self::assemble(
            codec,
            model.denoiser.deep_copy()?,
            model.training.clone(),
            images,
            masks,
            Some((optimizer_state, step)),
        )
    }

    fn assemble(
        codec: CodecParams,
        denoiser_store: ParamStore,
        config: TrainingConfig,
        images: &[RgbImage],
        masks: &[BinaryMask],
        state: Option<(&std::collections::BTreeMap<String, Tensor>, usize)>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("no training samples".into()));
        }
        if images.len() != masks.len() {
            return Err(Error::Validation(format!(
                "{} images but {} masks",
                images.len(),
                masks.len()
            )));
        }
        if config.denoiser.latent_channels != codec.config.latent_channels {
            return Err(Error::Config(format!(
                "denoiser expects {} latent channels, codec produces {}",
                config.denoiser.latent_channels, codec.config.latent_channels
            )));
        }
        let nets = codec.nets()?;
        let denoiser = Denoiser::from_store(&denoiser_store, &config.denoiser)?;
        let mut named: Vec<(String, candle_core::Var)> = denoiser_store
            .iter()
            .map(|(k, v)| (format!("denoiser.{k}"), v.clone()))
            .collect();
        if config.vision_encoder_trainable {
            named.extend(
                codec
                    .condition
                    .iter()
                    .map(|(k, v)| (format!("condition.{k}"), v.clone())),
            );
        }
        let mut optimizer = AdamW::new(
            named,
            AdamWConfig {
                learning_rate: config.learning_rate,
                weight_decay: config.weight_decay,
                ..Default::default()
            },
        )?;
        let step = match state {
            Some((tensors, step)) => {
                optimizer.load_state(tensors, step)?;
                step
            }
            None => 0,
        };

        let (dtype, device) = (DType::F32, Device::Cpu);
        let image_t: Vec<Tensor> = images
            .iter()
            .map(|i| i.to_tensor(dtype, &device))
            .collect::<Result<_>>()?;
        let images = Tensor::stack(&image_t, 0)?;
        let mut latents = Vec::new();
        for chunk in masks.chunks(64) {
            let maps: Vec<Tensor> = chunk
                .iter()
                .map(|m| m.to_map_tensor(dtype, &device))
                .collect::<Result<_>>()?;
            latents.push(nets.encode_mask_batch(&Tensor::stack(&maps, 0)?)?);
        }
        let clean_latents = Tensor::cat(&latents, 0)?;
        if images.dims()[2..] != [codec.config.image_height, codec.config.image_width] {
            return Err(Error::ShapeMismatch {
                expected: vec![codec.config.image_height, codec.config.image_width],
                actual: images.dims()[2..].to_vec(),
            });
        }

        Ok(Self {
            schedule: config.schedule()?,
            config,
            codec,
            nets,
            denoiser_store,
            denoiser,
            optimizer,
            step,
            images,
            clean_latents,
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Losses of the steps run by this trainer instance.
    pub fn log(&self) -> &[LossBreakdown] {
        &self.log
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// One optimisation step on a seeded mini-batch.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let mut rng = step_rng(self.config.seed, self.step);
        let n = self.images.dims()[0];
        let idx: Vec<u32> = (0..self.config.batch_size)
            .map(|_| rng.random_range(0..n) as u32)
            .collect();
        let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
        let x = self.images.index_select(&idx, 0)?;
        let z0 = self.clean_latents.index_select(&idx, 0)?;
        let ts: Vec<usize> = (0..self.config.batch_size)
            .map(|_| sample_timestep(&mut rng, self.config.timesteps))
            .collect();
        let noise = nn::randn(&mut rng, z0.dims(), z0.dtype(), z0.device())?;
        let breakdown = self.optimise(&x, &z0, &noise, &ts)?;
        self.step += 1;
        self.log.push(breakdown);
        Ok(breakdown)
    }

    /// Forward, loss, backward and update for explicit inputs.
    pub fn optimise(&mut self, x: &Tensor, z0: &Tensor, noise: &Tensor, ts: &[usize]) -> Result<LossBreakdown> {
        let z_t = self.schedule.forward_diffuse_tensor(z0, noise, ts)?;
        let mut z_c = self.nets.encode_condition_batch(x)?;
        if !self.config.vision_encoder_trainable {
            z_c = z_c.detach();
        }
        let noise_hat = predict_noise(
            &self.denoiser,
            &self.schedule,
            self.config.output,
            &z_t,
            &z_c,
            ts,
        )?;
        let noise_loss = nn::l1_mean(&noise_hat, noise)?;
        let z0_hat = self
            .schedule
            .direct_latent_estimate_tensor(&z_t, &noise_hat, ts)?;
        let latent_loss = nn::l1_mean(&z0_hat, z0)?;
        let total = if self.config.lambda == 0.0 {
            noise_loss.clone()
        } else {
            (&noise_loss + (&latent_loss * self.config.lambda)?)?
        };
        let breakdown = combined_loss(
            nn::scalar_f64(&noise_loss)?,
            nn::scalar_f64(&latent_loss)?,
            self.config.lambda,
        )
        .map_err(|_| Error::Divergence {
            step: self.step,
            loss: f64::NAN,
        })?;
        if !breakdown.total.is_finite() || breakdown.total.abs() > self.config.divergence_limit {
            return Err(Error::Divergence {
                step: self.step,
                loss: breakdown.total,
            });
        }
        let g = total.backward()?;
        self.optimizer.step(&g)?;
        Ok(breakdown)
    }

    /// Steps until `total_steps` is reached.
    pub fn run(&mut self, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<()> {
        while self.step < self.config.total_steps {
            let b = self.train_step()?;
            on_step(self.step, &b);
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SegModel> {
        Ok(SegModel {
            codec: CodecParams {
                condition: self.codec.condition.deep_copy()?,
                ..self.codec.clone()
            },
            denoiser: self.denoiser_store.deep_copy()?,
            training: self.config.clone(),
        })
    }
}

/// Trains to completion, returning the model and its per-step losses.
pub fn train(
    codec: &CodecParams,
    config: &TrainingConfig,
    images: &[RgbImage],
    masks: &[BinaryMask],
) -> Result<(SegModel, Vec<LossBreakdown>)> {
    let mut trainer = Trainer::new(codec, config.clone(), images, masks)?;
    trainer.run(|step, b| {
        if step % 500 == 0 {
            log::info!(
                "step {step}: total {:.4} noise {:.4} latent {:.4}",
                b.total,
                b.noise_loss,
                b.latent_loss
            );
        }
    })?;
    Ok((trainer.model()?, trainer.log.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceDiagnostics {
    pub denoiser_calls: usize,
    pub timesteps: Vec<usize>,
    pub wall_time: Duration,
    /// Time spent in the denoising loop alone, without encode and decode.
    pub denoise_time: Duration,
}

/// Inference-time view of a [`SegModel`].
#[derive(Debug)]
pub struct Segmenter {
    nets: CodecNets,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    output: OutputParameterization,
}

impl Segmenter {
    pub fn new(model: &SegModel) -> Result<Self> {
        let nets = model.codec.nets()?;
        Ok(Self {
            denoiser: Denoiser::from_store(&model.denoiser, &model.training.denoiser)?,
            schedule: model.training.schedule()?,
            output: model.training.output,
            nets,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Total denoiser forward passes so far.
    pub fn denoiser_calls(&self) -> usize {
        self.denoiser.calls()
    }

    fn initial_latent(&self, config: &InferenceConfig, t0: usize) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend(self.nets.config.latent_shape());
        let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
        let n = nn::randn(&mut rng, &shape, DType::F32, &Device::Cpu)?;
        Ok(match config.noise_init {
            NoiseInit::UnitVariance => n,
            NoiseInit::MarginalScaled => (n * self.schedule.coefficients(t0)?.1)?,
        })
    }

    /// Segments a batch; every image starts from the same seeded noise, so
    /// results match per-image calls.
    pub fn segment_batch(&self, images: &[RgbImage], config: &InferenceConfig) -> Result<(Vec<BinaryMask>, InferenceDiagnostics)> {
        let start = Instant::now();
        let calls_before = self.denoiser.calls();
        let ts = config.timesteps(&self.schedule)?;
        let b = images.len();
        if b == 0 {
            return Err(Error::EmptyDataset("no images to segment".into()));
        }
        let x: Vec<Tensor> = images
            .iter()
            .map(|i| {
                self.nets.config.check_image(i.height(), i.width())?;
                i.to_tensor(DType::F32, &Device::Cpu)
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack(&x, 0)?;
        let z_c = self.nets.encode_condition_batch(&x)?.detach();
        let mut z = self
            .initial_latent(config, ts[0])?
            .repeat((b, 1, 1, 1))?;
        let mut z0_hat = z.clone();
        let denoise_start = Instant::now();
        for (k, &t) in ts.iter().enumerate() {
            let t_batch = vec![t; b];
            let noise_hat =
                predict_noise(&self.denoiser, &self.schedule, self.output, &z, &z_c, &t_batch)?
                    .detach();
            z0_hat = self
                .schedule
                .direct_latent_estimate_tensor(&z, &noise_hat, &t_batch)?
                .detach();
            if let Some(&next) = ts.get(k + 1) {
                z = self
                    .schedule
                    .forward_diffuse_tensor(&z0_hat, &noise_hat, &vec![next; b])?;
            }
        }
        let denoise_time = denoise_start.elapsed();
        let maps = self.nets.decode_batch(&z0_hat)?;
        let masks = binarize_batch(&maps, config.binarize_threshold)?;
        let calls = self.denoiser.calls() - calls_before;
        Ok((
            masks,
            InferenceDiagnostics {
                denoiser_calls: calls,
                timesteps: ts,
                wall_time: start.elapsed(),
                denoise_time,
            },
        ))
    }

    pub fn segment(&self, image: &RgbImage, config: &InferenceConfig) -> Result<(BinaryMask, InferenceDiagnostics)> {
        let (mut masks, diag) = self.segment_batch(std::slice::from_ref(image), config)?;
        Ok((masks.remove(0), diag))
    }

    /// One denoiser evaluation at `config.t_fix`.
    pub fn infer_single_step(&self, image: &RgbImage, config: &InferenceConfig) -> Result<(BinaryMask, InferenceDiagnostics)> {
        self.segment(
            image,
            &InferenceConfig {
                mode: InferenceMode::SingleStep,
                ..config.clone()
            },
        )
    }

    /// Iterative denoising along the configured ladder.
    pub fn infer_multi_step(&self, image: &RgbImage, config: &InferenceConfig) -> Result<(BinaryMask, InferenceDiagnostics)> {
        self.segment(
            image,
            &InferenceConfig {
                mode: InferenceMode::MultiStep,
                ..config.clone()
            },
        )
    }

    /// Segments many images in chunks.
    pub fn segment_all(&self, images: &[RgbImage], config: &InferenceConfig, chunk: usize) -> Result<Vec<BinaryMask>> {
        let mut out = Vec::with_capacity(images.len());
        for c in images.chunks(chunk.max(1)) {
            out.extend(self.segment_batch(c, config)?.0);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_evenly_strided() {
        let l = ladder(1000, 50).unwrap();
        assert_eq!(l.len(), 50);
        assert_eq!(l[0], 1000);
        assert_eq!(l[1], 980);
        assert_eq!(*l.last().unwrap(), 20);
        assert_eq!(ladder(50, 1).unwrap(), vec![50]);
        assert!(ladder(10, 11).is_err());
        assert!(ladder(10, 0).is_err());
    }

    #[test]
    fn single_step_visits_t_fix() {
        let s = NoiseSchedule::default();
        let cfg = InferenceConfig::default();
        assert_eq!(cfg.timesteps(&s).unwrap(), vec![50]);
        let bad = InferenceConfig { t_fix: 0, ..cfg };
        assert!(bad.timesteps(&s).is_err());
    }

    #[test]
    fn mismatched_denoiser_timesteps_rejected() {
        let cfg = TrainingConfig {
            timesteps: 500,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
