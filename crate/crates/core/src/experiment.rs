//! Experiment configuration and the runs built on it: dataset preparation,
//! the fold protocol, the ablation grid, the augmentation sweep and the
//! efficiency benchmark.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_codec, save_codec};
use crate::codec::{pretrain_codec, CodecConfig, CodecParams, PretrainConfig, PretrainReport};
use crate::data::{
    assign_test_split, kfold_split, load_dataset, load_samples, make_toy_dataset,
    subsample_training, DatasetManifest, Provenance, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, percentile, FoldMetrics, MetricSummary, MetricsConfig, MetricsReport, SampleMetrics};
use crate::pipeline::{InferenceConfig, InferenceMode, SegModel, Trainer, TrainingConfig};
use crate::raster::RgbImage;
use crate::synth::{build_augmented_dataset, traditional_augment, AugmentConfig, Backend, PromptBank};

/// Synthetic count of the best text-guided arm in the published sweep.
pub const TEXT_GUIDED_OPTIMUM: usize = 100;
pub const SWEEP_COUNTS: [usize; 5] = [0, 20, 50, 100, 200];
/// Steps averaged into one point of a stored loss curve.
pub const LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetSource {
    Toy {
        n_images: usize,
        image_size: usize,
        seed: u64,
    },
    /// An `images/` + `masks/` directory pair.
    Directory { root: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationKind {
    None,
    Traditional,
    TextGuided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub n_synth: usize,
}

impl AugmentationSpec {
    pub const NONE: Self = Self {
        kind: AugmentationKind::None,
        n_synth: 0,
    };
    pub const TRADITIONAL: Self = Self {
        kind: AugmentationKind::Traditional,
        n_synth: 0,
    };

    pub fn text_guided(n_synth: usize) -> Self {
        Self {
            kind: AugmentationKind::TextGuided,
            n_synth,
        }
    }
}

/// Where models are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on the whole training pool, score on the untouched test split.
    TestSplit,
    /// k-fold cross-validation; statistics over folds and seeds.
    CrossValidation,
}

/// Records the folds are drawn from under cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldPool {
    /// Training records only; the test split stays untouched.
    TrainingPool,
    /// Every real record, test split included.
    AllRecords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub test_size: usize,
    pub split_seed: u64,
    /// Keep only this many real training records.
    pub train_subsample: Option<usize>,
    pub codec: CodecConfig,
    pub pretrain: PretrainConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub augmentation: AugmentationSpec,
    pub augment: AugmentConfig,
    pub backend: Backend,
    pub protocol: Protocol,
    pub folds: usize,
    pub fold_pool: FoldPool,
    pub seeds: Vec<u64>,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
    /// Images per inference batch during evaluation.
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Toy {
                n_images: 250,
                image_size: 64,
                seed: 0,
            },
            test_size: 50,
            split_seed: 0,
            train_subsample: None,
            codec: CodecConfig::default(),
            pretrain: PretrainConfig::default(),
            training: TrainingConfig::default(),
            inference: InferenceConfig::default(),
            augmentation: AugmentationSpec::NONE,
            augment: AugmentConfig::default(),
            backend: Backend::Procedural,
            protocol: Protocol::TestSplit,
            folds: 5,
            fold_pool: FoldPool::TrainingPool,
            seeds: vec![0, 1, 2],
            metrics: MetricsConfig::default(),
            output_dir: PathBuf::from("latentseg-out"),
            eval_batch: 25,
        }
    }
}

pub const PRESETS: [&str; 2] = ["desk", "smoke"];

impl ExperimentConfig {
    /// `desk`: 200/50 toy split, 5000 steps. `smoke`: a minute-scale wiring
    /// check whose numbers mean nothing.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "smoke" => {
                let mut c = Self {
                    dataset: DatasetSource::Toy {
                        n_images: 60,
                        image_size: 64,
                        seed: 0,
                    },
                    test_size: 12,
                    seeds: vec![0],
                    folds: 2,
                    eval_batch: 12,
                    ..Self::default()
                };
                c.pretrain.steps = 40;
                c.pretrain.target_mae = 1.0;
                c.training.total_steps = 20;
                c.inference.multi_step_count = 5;
                Ok(c)
            }
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("evaluation batch must be positive".into()));
        }
        if let DatasetSource::Toy { n_images, .. } = self.dataset {
            if n_images <= self.test_size {
                return Err(Error::Config(format!(
                    "toy corpus of {n_images} images cannot hold a test split of {}",
                    self.test_size
                )));
            }
        }
        if self.augmentation.kind != AugmentationKind::TextGuided && self.augmentation.n_synth != 0 {
            return Err(Error::Config("n_synth is only meaningful for text-guided augmentation".into()));
        }
        self.codec.validate()?;
        self.training.validate()?;
        self.inference.timesteps(&self.training.schedule()?)?;
        Ok(())
    }
}

/// Loads or renders the dataset and applies the test split and subsampling.
pub fn prepare_dataset(config: &ExperimentConfig) -> Result<DatasetManifest> {
    let base = match &config.dataset {
        DatasetSource::Toy {
            n_images,
            image_size,
            seed,
        } => make_toy_dataset(&config.output_dir.join("data"), *n_images, *image_size, *seed)?,
        DatasetSource::Directory { root } => load_dataset(root)?,
    };
    let mut manifest = assign_test_split(&base, config.test_size, config.split_seed)?;
    if let Some(n) = config.train_subsample {
        manifest = subsample_training(&manifest, n, config.split_seed)?;
    }
    Ok(manifest)
}

/// Pretrains the codec on the real training masks.
pub fn prepare_codec(config: &ExperimentConfig, manifest: &DatasetManifest) -> Result<(CodecParams, PretrainReport)> {
    let train = manifest.filter(|r| r.provenance == Provenance::Real && r.split == Split::Train);
    let masks: Vec<_> = load_samples(&train)?.into_iter().map(|s| s.mask).collect();
    pretrain_codec(&masks, &config.codec, &config.pretrain)
}

/// One configuration to train and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub augmentation: AugmentationSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Last step of the averaging window.
    pub step: usize,
    pub noise_loss: f64,
    pub latent_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub fold: usize,
    pub train_records: usize,
    pub synthetic_records: usize,
    pub samples: Vec<SampleMetrics>,
    pub loss_curve: Vec<LossPoint>,
    pub condition_digest_before: String,
    pub condition_digest_after: String,
    pub denoiser_calls_per_batch: usize,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub augmentation: AugmentationSpec,
    pub runs: Vec<RunRecord>,
    /// Statistics over runs (seeds times folds); absent when the arm failed.
    pub summary: Option<MetricSummary>,
    pub error: Option<String>,
}

impl ArmResult {
    pub fn mean_dice(&self) -> Option<f64> {
        self.summary.as_ref().map(|s| s.dice.mean)
    }

    /// Mean Dice of the runs trained with `seed`.
    pub fn seed_dice(&self, seed: u64) -> Option<f64> {
        let d: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.seed == seed)
            .flat_map(|r| r.samples.iter().map(|s| s.dice))
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// Recomputes an arm summary from its per-sample records.
pub fn summarize(runs: &[RunRecord], metrics: MetricsConfig) -> Result<MetricSummary> {
    let folds = runs
        .iter()
        .enumerate()
        .map(|(i, r)| FoldMetrics {
            fold: i,
            samples: r.samples.clone(),
        })
        .collect();
    Ok(MetricsReport::from_folds(folds, metrics)?.summary)
}

fn loss_curve(log: &[crate::schedule::LossBreakdown], first_step: usize) -> Vec<LossPoint> {
    log.chunks(LOSS_WINDOW)
        .enumerate()
        .map(|(i, w)| {
            let n = w.len() as f64;
            LossPoint {
                step: first_step + i * LOSS_WINDOW + w.len(),
                noise_loss: w.iter().map(|b| b.noise_loss).sum::<f64>() / n,
                latent_loss: w.iter().map(|b| b.latent_loss).sum::<f64>() / n,
                lambda: w[0].lambda,
                total: w.iter().map(|b| b.total).sum::<f64>() / n,
            }
        })
        .collect()
}

struct Trained {
    model: SegModel,
    curve: Vec<LossPoint>,
    digest_before: String,
    train_seconds: f64,
}

/// Shared state for a family of runs: dataset, frozen codec, and a cache of
/// trained models so arms differing only at inference reuse checkpoints.
pub struct Harness {
    pub config: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub codec: CodecParams,
    pub codec_report: Option<PretrainReport>,
    models: HashMap<String, Trained>,
    augmented: HashMap<String, DatasetManifest>,
}

impl Harness {
    /// Prepares the dataset and pretrains the codec, or loads it from
    /// `output_dir/codec.safetensors` when present.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let manifest = prepare_dataset(&config)?;
        let path = config.output_dir.join("codec.safetensors");
        if path.exists() {
            let codec = load_codec(&path)?;
            if codec.config == config.codec {
                return Self::with_codec(config, manifest, codec, None);
            }
            log::warn!("{}: codec config differs, retraining", path.display());
        }
        let (codec, report) = prepare_codec(&config, &manifest)?;
        save_codec(&path, &codec)?;
        Self::with_codec(config, manifest, codec, Some(report))
    }

    pub fn with_codec(
        config: ExperimentConfig,
        manifest: DatasetManifest,
        codec: CodecParams,
        codec_report: Option<PretrainReport>,
    ) -> Result<Self> {
        config.validate()?;
        if codec.config.latent_channels != config.training.denoiser.latent_channels {
            return Err(Error::Config("codec and denoiser latent channels differ".into()));
        }
        Ok(Self {
            config,
            manifest,
            codec,
            codec_report,
            models: HashMap::new(),
            augmented: HashMap::new(),
        })
    }

    /// The configured single arm.
    pub fn base_arm(&self, name: &str) -> ArmSpec {
        ArmSpec {
            name: name.into(),
            training: self.config.training.clone(),
            inference: self.config.inference.clone(),
            augmentation: self.config.augmentation,
        }
    }

    /// The dataset with `spec` applied; synthetic generation is seeded by `seed`.
    pub fn augmented_manifest(&mut self, spec: AugmentationSpec, seed: u64) -> Result<DatasetManifest> {
        let key = format!("{:?}-{}-{seed}", spec.kind, spec.n_synth);
        if let Some(m) = self.augmented.get(&key) {
            return Ok(m.clone());
        }
        let dir = self.config.output_dir.join("work").join(&key);
        let m = match spec.kind {
            AugmentationKind::None => self.manifest.clone(),
            AugmentationKind::Traditional => traditional_augment(&self.manifest, &dir)?,
            AugmentationKind::TextGuided => build_augmented_dataset(
                &self.manifest,
                spec.n_synth,
                &PromptBank::default(),
                seed,
                &self.config.backend,
                &dir,
                &self.config.augment,
            )?,
        };
        self.augmented.insert(key, m.clone());
        Ok(m)
    }

    /// (fold index, training manifest, evaluation manifest) per evaluation unit.
    fn units(&self, augmented: &DatasetManifest) -> Result<Vec<(usize, DatasetManifest, DatasetManifest)>> {
        match self.config.protocol {
            Protocol::TestSplit => Ok(vec![(
                0,
                augmented.split(Split::Train),
                augmented.filter(|r| r.split == Split::Test && r.provenance == Provenance::Real),
            )]),
            Protocol::CrossValidation => {
                let mut pool = augmented.clone();
                if self.config.fold_pool == FoldPool::AllRecords {
                    for r in &mut pool.records {
                        r.split = Split::Train;
                    }
                }
                Ok(kfold_split(&pool, self.config.folds, self.config.split_seed)?
                    .into_iter()
                    .map(|f| (f.index, f.train, f.validation))
                    .collect())
            }
        }
    }

    fn train_cached(&mut self, key: String, training: TrainingConfig, train: &DatasetManifest) -> Result<&Trained> {
        if !self.models.contains_key(&key) {
            let samples = load_samples(train)?;
            let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
            let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
            let start = Instant::now();
            let mut trainer = Trainer::new(&self.codec, training, &images, &masks)?;
            let digest_before = trainer.model()?.codec.condition.digest()?;
            trainer.run(|step, b| {
                if step % 500 == 0 {
                    log::info!("step {step}: noise {:.4} latent {:.4}", b.noise_loss, b.latent_loss);
                }
            })?;
            let trained = Trained {
                model: trainer.model()?,
                curve: loss_curve(trainer.log(), 0),
                digest_before,
                train_seconds: start.elapsed().as_secs_f64(),
            };
            self.models.insert(key.clone(), trained);
        }
        Ok(&self.models[&key])
    }

    /// Trained model for one seed and fold, if this harness has built it.
    pub fn cached_model(&self, arm: &ArmSpec, seed: u64, fold: usize) -> Option<&SegModel> {
        self.models.get(&Self::model_key(arm, seed, fold)).map(|t| &t.model)
    }

    fn model_key(arm: &ArmSpec, seed: u64, fold: usize) -> String {
        let training = TrainingConfig {
            seed,
            ..arm.training.clone()
        };
        serde_json::to_string(&(training, arm.augmentation, fold)).expect("serializable")
    }

    fn run_unit(&mut self, arm: &ArmSpec, seed: u64) -> Result<Vec<RunRecord>> {
        let augmented = self.augmented_manifest(arm.augmentation, seed)?;
        let mut records = Vec::new();
        for (fold, train, eval) in self.units(&augmented)? {
            let training = TrainingConfig {
                seed,
                ..arm.training.clone()
            };
            let key = Self::model_key(arm, seed, fold);
            let metrics = self.config.metrics;
            let batch = self.config.eval_batch;
            let trained = self.train_cached(key, training, &train)?;
            let eval_samples = load_samples(&eval)?;
            let images: Vec<RgbImage> = eval_samples.iter().map(|s| s.image.clone()).collect();
            let segmenter = trained.model.segmenter()?;
            let preds = segmenter.segment_all(&images, &arm.inference, batch)?;
            let samples = preds
                .iter()
                .zip(&eval_samples)
                .map(|(p, s)| evaluate_pair(s.id.clone(), p, &s.mask, &metrics))
                .collect::<Result<Vec<_>>>()?;
            let calls = arm.inference.timesteps(segmenter.schedule())?.len();
            records.push(RunRecord {
                seed,
                fold,
                train_records: train.len(),
                synthetic_records: train.count(Provenance::Synthetic),
                samples,
                loss_curve: trained.curve.clone(),
                condition_digest_before: trained.digest_before.clone(),
                condition_digest_after: trained.model.codec.condition.digest()?,
                denoiser_calls_per_batch: calls,
                train_seconds: trained.train_seconds,
            });
        }
        Ok(records)
    }

    /// Trains and scores an arm on every configured seed. Failures are
    /// recorded in the result rather than propagated.
    pub fn run_arm(&mut self, arm: &ArmSpec) -> ArmResult {
        let mut runs = Vec::new();
        let mut error = None;
        for &seed in &self.config.seeds.clone() {
            match self.run_unit(arm, seed) {
                Ok(r) => runs.extend(r),
                Err(e) => {
                    log::error!("arm {} seed {seed} failed: {e}", arm.name);
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let summary = if error.is_none() {
            match summarize(&runs, self.config.metrics) {
                Ok(s) => Some(s),
                Err(e) => {
                    error = Some(e.to_string());
                    None
                }
            }
        } else {
            None
        };
        ArmResult {
            name: arm.name.clone(),
            augmentation: arm.augmentation,
            runs,
            summary,
            error,
        }
    }
}

pub const ABLATION_ROWS: [&str; 6] = [
    "baseline (real only)",
    "+ text-guided augmentation",
    "+ multi-step inference",
    "+ frozen vision encoder",
    "+ noise loss only",
    "+ traditional augmentation",
];

/// Row specs of the component ablation, derived from the harness base arm.
pub fn ablation_arms(base: &ArmSpec) -> Vec<ArmSpec> {
    let full = ArmSpec {
        name: ABLATION_ROWS[1].into(),
        augmentation: AugmentationSpec::text_guided(TEXT_GUIDED_OPTIMUM),
        ..base.clone()
    };
    vec![
        ArmSpec {
            name: ABLATION_ROWS[0].into(),
            augmentation: AugmentationSpec::NONE,
            ..base.clone()
        },
        full.clone(),
        ArmSpec {
            name: ABLATION_ROWS[2].into(),
            inference: InferenceConfig {
                mode: InferenceMode::MultiStep,
                ..full.inference.clone()
            },
            ..full.clone()
        },
        ArmSpec {
            name: ABLATION_ROWS[3].into(),
            training: TrainingConfig {
                vision_encoder_trainable: false,
                ..full.training.clone()
            },
            ..full.clone()
        },
        ArmSpec {
            name: ABLATION_ROWS[4].into(),
            training: TrainingConfig {
                lambda: 0.0,
                ..full.training.clone()
            },
            ..full.clone()
        },
        ArmSpec {
            name: ABLATION_ROWS[5].into(),
            augmentation: AugmentationSpec::TRADITIONAL,
            ..base.clone()
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<ArmResult>,
    /// Arms of the published grid that are not implemented here.
    pub absent: Vec<AbsentArm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsentArm {
    pub name: String,
    pub reason: String,
}

pub fn run_ablation_grid(harness: &mut Harness) -> GridReport {
    let arms = ablation_arms(&harness.base_arm("base"));
    GridReport {
        rows: arms.iter().map(|a| harness.run_arm(a)).collect(),
        absent: Vec::new(),
    }
}

pub fn sweep_arms(base: &ArmSpec) -> Vec<ArmSpec> {
    let mut arms: Vec<ArmSpec> = SWEEP_COUNTS
        .iter()
        .map(|&n| ArmSpec {
            name: if n == 0 {
                "none".into()
            } else {
                format!("text-guided ({n})")
            },
            augmentation: AugmentationSpec::text_guided(n),
            ..base.clone()
        })
        .collect();
    arms.insert(
        1,
        ArmSpec {
            name: "traditional (rotation, flip)".into(),
            augmentation: AugmentationSpec::TRADITIONAL,
            ..base.clone()
        },
    );
    arms
}

pub fn run_augmentation_sweep(harness: &mut Harness) -> GridReport {
    let arms = sweep_arms(&harness.base_arm("base"));
    GridReport {
        rows: arms.iter().map(|a| harness.run_arm(a)).collect(),
        absent: vec![AbsentArm {
            name: "GAN-based (100)".into(),
            reason: "out of scope: no GAN generator is implemented".into(),
        }],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub images: usize,
    pub warmup: usize,
    pub multi_step_count: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            images: 50,
            warmup: 5,
            multi_step_count: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_s: f64,
    pub q1_s: f64,
    pub q3_s: f64,
}

impl TimingStats {
    fn from_durations(d: &[Duration]) -> Self {
        let s: Vec<f64> = d.iter().map(|d| d.as_secs_f64()).collect();
        Self {
            median_s: percentile(&s, 50.0),
            q1_s: percentile(&s, 25.0),
            q3_s: percentile(&s, 75.0),
        }
    }

    pub fn iqr_s(&self) -> f64 {
        self.q3_s - self.q1_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    /// Denoiser calls per image; identical for every timed image.
    pub denoiser_calls: usize,
    pub per_image: TimingStats,
    pub denoise_stage: TimingStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub images: usize,
    pub warmup: usize,
    pub single: ModeTiming,
    pub multi: ModeTiming,
    /// Ratio of median per-image times, multi over single.
    pub speedup_per_image: f64,
    /// Same ratio for the denoising stage alone.
    pub speedup_denoise: f64,
}

fn time_mode(model: &SegModel, images: &[RgbImage], cfg: &InferenceConfig, warmup: usize) -> Result<ModeTiming> {
    let seg = model.segmenter()?;
    for i in 0..warmup {
        seg.segment(&images[i % images.len()], cfg)?;
    }
    let mut total = Vec::with_capacity(images.len());
    let mut denoise = Vec::with_capacity(images.len());
    let mut calls = None;
    for img in images {
        let (_, d) = seg.segment(img, cfg)?;
        if *calls.get_or_insert(d.denoiser_calls) != d.denoiser_calls {
            return Err(Error::Validation("denoiser call count varied between images".into()));
        }
        total.push(d.wall_time);
        denoise.push(d.denoise_time);
    }
    Ok(ModeTiming {
        denoiser_calls: calls.unwrap_or(0),
        per_image: TimingStats::from_durations(&total),
        denoise_stage: TimingStats::from_durations(&denoise),
    })
}

/// Per-image timing of single-step against multi-step inference, one image
/// at a time in a single process.
pub fn run_efficiency_benchmark(
    model: &SegModel,
    images: &[RgbImage],
    inference: &InferenceConfig,
    config: &BenchmarkConfig,
) -> Result<EfficiencyReport> {
    if images.len() < config.images || config.images == 0 {
        return Err(Error::Validation(format!(
            "benchmark needs {} images, got {}",
            config.images,
            images.len()
        )));
    }
    let images = &images[..config.images];
    let single = time_mode(
        model,
        images,
        &InferenceConfig {
            mode: InferenceMode::SingleStep,
            ..inference.clone()
        },
        config.warmup,
    )?;
    let multi = time_mode(
        model,
        images,
        &InferenceConfig {
            mode: InferenceMode::MultiStep,
            multi_step_count: config.multi_step_count,
            ..inference.clone()
        },
        config.warmup,
    )?;
    Ok(EfficiencyReport {
        images: config.images,
        warmup: config.warmup,
        speedup_per_image: multi.per_image.median_s / single.per_image.median_s,
        speedup_denoise: multi.denoise_stage.median_s / single.denoise_stage.median_s,
        single,
        multi,
    })
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}
