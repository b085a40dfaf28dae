//! `latentseg` command line. Configuration is layered: preset, then an
//! optional TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentseg::checkpoint::{save_codec, Checkpoint};
use latentseg::data::{load_samples, Provenance, Split, MANIFEST_FILE};
use latentseg::experiment::{
    prepare_codec, prepare_dataset, run_ablation_grid, run_augmentation_sweep,
    run_efficiency_benchmark, write_json, AugmentationKind, AugmentationSpec, BenchmarkConfig,
    DatasetSource, ExperimentConfig, Harness,
};
use latentseg::pipeline::{InferenceMode, Trainer};
use latentseg::raster::RgbImage;
use latentseg::report::{emit_report, CodecSummary, ExperimentResults, RESULTS_FILE};
use latentseg::synth::{Backend, ExternalBackend};
use latentseg::Error;
use serde_json::json;

const OUTPUT_ENV: &str = "LATENTSEG_OUT";

#[derive(Parser, Debug)]
#[command(name = "latentseg", version, about = "Latent-diffusion segmentation experiments")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring `ExperimentConfig` fields. Unset flags leave the preset
/// or config-file value alone.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Named base configuration (desk, smoke).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// TOML file with `ExperimentConfig` keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    output: Option<PathBuf>,
    /// Use an images/ + masks/ directory instead of the toy corpus.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    n_images: Option<usize>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    #[arg(long, global = true)]
    test_size: Option<usize>,
    #[arg(long, global = true)]
    train_subsample: Option<usize>,
    #[arg(long, global = true)]
    codec_steps: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    frozen_encoder: bool,
    #[arg(long, global = true)]
    t_fix: Option<usize>,
    #[arg(long, global = true)]
    multi_step: bool,
    #[arg(long, global = true)]
    multi_step_count: Option<usize>,
    /// unit-variance or marginal-scaled.
    #[arg(long, global = true)]
    noise_init: Option<String>,
    #[arg(long, global = true)]
    noise_seed: Option<u64>,
    /// none, traditional or text-guided.
    #[arg(long, global = true)]
    augmentation: Option<String>,
    #[arg(long, global = true)]
    n_synth: Option<usize>,
    /// Exchange directory of an external generation backend.
    #[arg(long, global = true)]
    external_dir: Option<PathBuf>,
    /// test-split or cross-validation.
    #[arg(long, global = true)]
    protocol: Option<String>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// training-pool or all-records.
    #[arg(long, global = true)]
    fold_pool: Option<String>,
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    nsd_tolerance: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the toy corpus and write its manifest.
    MakeToy,
    /// Pretrain the mask autoencoder on the training masks.
    PretrainCodec,
    /// Build the augmented training manifest.
    Generate,
    /// Train one model (first configured seed) and save a checkpoint.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a saved checkpoint up to --steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment a PNG or a directory of PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the configured arm on every seed.
    Evaluate,
    /// Run the six-row component ablation.
    Ablate,
    /// Run the augmentation sweep.
    Sweep,
    /// Time single-step against multi-step inference.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// Re-emit tables and plots from a results document.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T> = Result<T, Error>;

fn kebab<T: serde::de::DeserializeOwned>(flag: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(json!(value))
        .map_err(|_| Error::Config(format!("--{flag}: unrecognized value {value:?}")))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve_config(o: &Overrides) -> CliResult<ExperimentConfig> {
    let mut config = ExperimentConfig::preset(&o.preset)?;
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut base = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, file);
        config = base
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(v) = &o.output {
        config.output_dir = v.clone();
    }
    if let Some(v) = &o.data_dir {
        config.dataset = DatasetSource::Directory { root: v.clone() };
    }
    if let DatasetSource::Toy { n_images, image_size, .. } = &mut config.dataset {
        if let Some(v) = o.n_images {
            *n_images = v;
        }
        if let Some(v) = o.image_size {
            *image_size = v;
        }
    }
    if let Some(v) = o.image_size {
        config.codec.image_height = v;
        config.codec.image_width = v;
    }
    if let Some(v) = o.test_size {
        config.test_size = v;
    }
    if o.train_subsample.is_some() {
        config.train_subsample = o.train_subsample;
    }
    if let Some(v) = o.codec_steps {
        config.pretrain.steps = v;
    }
    let t = &mut config.training;
    if let Some(v) = o.steps {
        t.total_steps = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.lambda {
        t.lambda = v;
    }
    if o.frozen_encoder {
        t.vision_encoder_trainable = false;
    }
    let i = &mut config.inference;
    if let Some(v) = o.t_fix {
        i.t_fix = v;
    }
    if o.multi_step {
        i.mode = InferenceMode::MultiStep;
    }
    if let Some(v) = o.multi_step_count {
        i.multi_step_count = v;
    }
    if let Some(v) = &o.noise_init {
        i.noise_init = kebab("noise-init", v)?;
    }
    if let Some(v) = o.noise_seed {
        i.noise_seed = v;
    }
    if let Some(v) = &o.augmentation {
        let kind: AugmentationKind = kebab("augmentation", v)?;
        config.augmentation = AugmentationSpec {
            kind,
            n_synth: if kind == AugmentationKind::TextGuided {
                config.augmentation.n_synth
            } else {
                0
            },
        };
    }
    if let Some(v) = o.n_synth {
        config.augmentation = AugmentationSpec::text_guided(v);
    }
    if let Some(v) = &o.external_dir {
        config.backend = Backend::External(ExternalBackend::new(v));
    }
    if let Some(v) = &o.protocol {
        config.protocol = kebab("protocol", v)?;
    }
    if let Some(v) = o.folds {
        config.folds = v;
    }
    if let Some(v) = &o.fold_pool {
        config.fold_pool = kebab("fold-pool", v)?;
    }
    if let Some(v) = &o.seeds {
        config.seeds = v.clone();
    }
    if let Some(v) = o.nsd_tolerance {
        config.metrics.nsd_tolerance = v;
    }
    config.validate()?;
    Ok(config)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn report_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("report")
}

/// Existing results in the report directory, so successive commands build
/// one report.
fn existing_results(config: &ExperimentConfig) -> ExperimentResults {
    let path = report_dir(config).join(RESULTS_FILE);
    match ExperimentResults::load(&path) {
        Ok(mut r) if r.config == *config => {
            r.config = config.clone();
            r
        }
        _ => ExperimentResults::new(config.clone()),
    }
}

fn finish(results: &ExperimentResults) -> CliResult<()> {
    let dir = report_dir(&results.config);
    let files = emit_report(results, &dir)?;
    print_json(&json!({ "report": dir, "digest": files.digest }));
    Ok(())
}

fn codec_summary(h: &Harness) -> Option<CodecSummary> {
    h.codec_report.as_ref().map(|r| CodecSummary {
        heldout_mae: r.heldout_mae,
        heldout_dice: r.heldout_dice,
        latent_scale: r.latent_scale,
    })
}

fn png_inputs(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG files in {}", input.display())));
    }
    Ok(files)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = resolve_config(&cli.opts)?;
    match cli.command {
        Command::MakeToy => {
            let m = prepare_dataset(&config)?;
            let path = config.output_dir.join("data").join(MANIFEST_FILE);
            m.save(&path)?;
            print_json(&json!({
                "manifest": path,
                "train": m.split(Split::Train).len(),
                "test": m.split(Split::Test).len(),
                "normal": m.records.iter().filter(|r| r.normal).count(),
                "digest": m.digest()?,
            }));
        }
        Command::PretrainCodec => {
            let m = prepare_dataset(&config)?;
            let (codec, report) = prepare_codec(&config, &m)?;
            let path = config.output_dir.join("codec.safetensors");
            save_codec(&path, &codec)?;
            write_json(&config.output_dir.join("codec_report.json"), &report)?;
            print_json(&json!({
                "codec": path,
                "heldout_mae": report.heldout_mae,
                "heldout_dice": report.heldout_dice,
                "latent_scale": report.latent_scale,
            }));
        }
        Command::Generate => {
            let mut h = Harness::prepare(config.clone())?;
            let seed = config.seeds[0];
            let m = h.augmented_manifest(config.augmentation, seed)?;
            let path = config.output_dir.join("augmented").join(MANIFEST_FILE);
            write_json(&path, &m)?;
            print_json(&json!({
                "manifest": path,
                "real": m.count(Provenance::Real),
                "synthetic": m.count(Provenance::Synthetic),
                "traditional": m.count(Provenance::TraditionalAugmented),
                "augmentation": m.augmentation,
            }));
        }
        Command::Train { checkpoint, resume } => {
            let out = checkpoint.unwrap_or_else(|| config.output_dir.join("model.safetensors"));
            let mut trainer = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    let mut model = ck.model;
                    model.training.total_steps = config.training.total_steps;
                    let mut h = Harness::with_codec(
                        config.clone(),
                        prepare_dataset(&config)?,
                        model.codec.clone(),
                        None,
                    )?;
                    let m = h.augmented_manifest(config.augmentation, model.training.seed)?;
                    let samples = load_samples(&m.split(Split::Train))?;
                    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
                    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
                    Trainer::resume(&model, &ck.optimizer, ck.step, &images, &masks)?
                }
                None => {
                    let mut h = Harness::prepare(config.clone())?;
                    let m = h.augmented_manifest(config.augmentation, config.seeds[0])?;
                    let samples = load_samples(&m.split(Split::Train))?;
                    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
                    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
                    let training = latentseg::pipeline::TrainingConfig {
                        seed: config.seeds[0],
                        ..config.training.clone()
                    };
                    Trainer::new(&h.codec, training, &images, &masks)?
                }
            };
            let start = trainer.step();
            trainer.run(|step, b| {
                if step % 100 == 0 {
                    log::info!("step {step}: noise {:.4} latent {:.4} total {:.4}", b.noise_loss, b.latent_loss, b.total);
                }
            })?;
            Checkpoint::from_trainer(&trainer)?.save(&out)?;
            let losses = out.with_extension("losses.json");
            write_json(&losses, &trainer.log())?;
            let last = trainer.log().last().copied();
            print_json(&json!({
                "checkpoint": out,
                "steps": [start, trainer.step()],
                "final_loss": last,
            }));
        }
        Command::Infer { checkpoint, input, out } => {
            let model = Checkpoint::load(&checkpoint)?.model;
            let seg = model.segmenter()?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut diagnostics = Vec::new();
            for path in png_inputs(&input)? {
                let image = RgbImage::load_png(&path)?;
                let (mask, diag) = seg.segment(&image, &config.inference)?;
                let name = path.file_name().expect("file path");
                mask.save_png(&out.join(name))?;
                diagnostics.push(json!({
                    "image": path,
                    "foreground_fraction": mask.area_fraction(),
                    "denoiser_calls": diag.denoiser_calls,
                    "timesteps": diag.timesteps,
                    "wall_time_s": diag.wall_time.as_secs_f64(),
                }));
            }
            write_json(&out.join("diagnostics.json"), &diagnostics)?;
            print_json(&json!({ "masks": out, "images": diagnostics.len() }));
        }
        Command::Evaluate => {
            let mut h = Harness::prepare(config.clone())?;
            let arm = h.run_arm(&h.base_arm("configured"));
            let mut results = existing_results(&config);
            results.codec = codec_summary(&h).or(results.codec);
            let failed = arm.error.clone();
            results.main = Some(arm);
            finish(&results)?;
            if let Some(e) = failed {
                return Err(Error::Run(format!("evaluation failed: {e}")));
            }
        }
        Command::Ablate => {
            let mut h = Harness::prepare(config.clone())?;
            let grid = run_ablation_grid(&mut h);
            let mut results = existing_results(&config);
            results.codec = codec_summary(&h).or(results.codec);
            results.ablation = Some(grid);
            finish(&results)?;
        }
        Command::Sweep => {
            let mut h = Harness::prepare(config.clone())?;
            let grid = run_augmentation_sweep(&mut h);
            let mut results = existing_results(&config);
            results.codec = codec_summary(&h).or(results.codec);
            results.sweep = Some(grid);
            finish(&results)?;
        }
        Command::Benchmark { checkpoint, images, warmup } => {
            let model = Checkpoint::load(&checkpoint)?.model;
            let m = prepare_dataset(&config)?;
            let mut pool: Vec<RgbImage> = load_samples(&m.split(Split::Test))?
                .into_iter()
                .map(|s| s.image)
                .collect();
            if pool.len() < images {
                let extra = load_samples(&m.split(Split::Train))?;
                pool.extend(extra.into_iter().map(|s| s.image).take(images - pool.len()));
            }
            let bench = BenchmarkConfig {
                images,
                warmup,
                multi_step_count: config.inference.multi_step_count,
            };
            let e = run_efficiency_benchmark(&model, &pool, &config.inference, &bench)?;
            let mut results = existing_results(&config);
            results.efficiency = Some(e);
            finish(&results)?;
        }
        Command::Report { results, out } => {
            let r = ExperimentResults::load(&results)?;
            let files = emit_report(&r, &out)?;
            print_json(&json!({ "report": out, "digest": files.digest }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
