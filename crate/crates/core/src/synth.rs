//! Synthetic lesion generation where the inpainting mask doubles as the
//! label: prompt bank, mask placement, a procedural inpainter and a
//! file-exchange adapter for an external inpainting backend.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_record, AugmentationHeader, DatasetManifest, LowFreqField, Provenance, SampleRecord,
    Split, SynthesisInfo, MAX_LESION_FRACTION, MIN_LESION_FRACTION,
};
use crate::error::{Error, Result};
use crate::metrics::squared_distance_field;
use crate::raster::{BinaryMask, Dihedral, PixelSpacing, RgbImage};

pub const NEGATIVE_PROMPT: &str = "smooth healthy tissue, normal colon wall";
pub const BANK_VERSION: &str = "polyp-morphology-v1";

const LEAD_PROMPTS: [&str; 3] = [
    "sessile polyp with irregular surface texture",
    "pedunculated polyp on mucosal fold",
    "flat adenomatous lesion",
];

const MORPHOLOGIES: [&str; 8] = [
    "sessile polyp",
    "pedunculated polyp",
    "flat adenomatous lesion",
    "serrated lesion",
    "hyperplastic polyp",
    "lobulated polyp",
    "depressed lesion",
    "villous adenoma",
];

const DESCRIPTORS: [&str; 7] = [
    "with irregular surface texture",
    "on mucosal fold",
    "with reddish vascular pattern",
    "with smooth glossy surface",
    "partially covered by mucus",
    "with pale granular surface",
    "near the haustral ridge",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub version: String,
    pub prompts: Vec<String>,
    pub negative_prompt: String,
}

impl Default for PromptBank {
    /// Fifty lesion descriptions, led by three canonical morphologies.
    fn default() -> Self {
        let mut prompts: Vec<String> = LEAD_PROMPTS.iter().map(|s| s.to_string()).collect();
        'fill: for d in DESCRIPTORS {
            for m in MORPHOLOGIES {
                if prompts.len() == 50 {
                    break 'fill;
                }
                let p = format!("{m} {d}");
                if !prompts.contains(&p) {
                    prompts.push(p);
                }
            }
        }
        Self {
            version: BANK_VERSION.into(),
            prompts,
            negative_prompt: NEGATIVE_PROMPT.into(),
        }
    }
}

impl PromptBank {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Validation("prompt bank is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.prompts {
            if p.trim().is_empty() {
                return Err(Error::Validation("prompt bank contains an empty prompt".into()));
            }
            if !seen.insert(p) {
                return Err(Error::Validation(format!("duplicate prompt {p:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Round-robin assignment.
    pub fn prompt(&self, i: usize) -> &str {
        &self.prompts[i % self.prompts.len()]
    }
}

/// Stable 64-bit hash of a prompt.
pub fn prompt_hash(prompt: &str) -> u64 {
    let d = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    /// Largest translation, as a fraction of the image side.
    pub max_shift: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_attempts: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            min_area_fraction: MIN_LESION_FRACTION,
            max_area_fraction: MAX_LESION_FRACTION,
            max_shift: 0.25,
            min_scale: 0.75,
            max_scale: 1.25,
            max_attempts: 200,
        }
    }
}

impl PlacementConfig {
    pub fn without_jitter() -> Self {
        Self {
            max_shift: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            ..Self::default()
        }
    }

    fn admits(&self, mask: &BinaryMask) -> bool {
        !mask.is_empty()
            && (self.min_area_fraction..=self.max_area_fraction).contains(&mask.area_fraction())
    }
}

/// Scales `mask` about its centroid by `scale`, shifts it by whole pixels and
/// clips it to the frame (nearest-neighbour resampling).
pub fn place_mask(mask: &BinaryMask, scale: f64, dy: i64, dx: i64) -> BinaryMask {
    let (h, w) = mask.shape();
    let n = mask.count().max(1) as f64;
    let (mut cy, mut cx) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                cy += r as f64;
                cx += c as f64;
            }
        }
    }
    let (cy, cx) = (cy / n, cx / n);
    BinaryMask::from_fn(h, w, |r, c| {
        let sr = cy + (r as f64 - dy as f64 - cy) / scale;
        let sc = cx + (c as f64 - dx as f64 - cx) / scale;
        let (sr, sc) = (sr.round(), sc.round());
        sr >= 0.0 && sc >= 0.0 && (sr as usize) < h && (sc as usize) < w && mask.get(sr as usize, sc as usize)
    })
}

/// Draws a pool mask and jitters it within `config`.
pub fn sample_mask_placement<R: Rng>(pool: &[BinaryMask], rng: &mut R, config: &PlacementConfig) -> Result<BinaryMask> {
    let candidates: Vec<&BinaryMask> = pool.iter().filter(|m| !m.is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::EmptyDataset("annotation pool has no foreground masks".into()));
    }
    if !(config.min_scale > 0.0 && config.min_scale <= config.max_scale) {
        return Err(Error::Config("placement scale range is empty".into()));
    }
    for _ in 0..config.max_attempts {
        let m = *candidates.choose(rng).expect("non-empty");
        let (h, w) = m.shape();
        let scale = rng.random_range(config.min_scale..=config.max_scale);
        let max_dy = (config.max_shift * h as f64).floor() as i64;
        let max_dx = (config.max_shift * w as f64).floor() as i64;
        let dy = rng.random_range(-max_dy..=max_dy);
        let dx = rng.random_range(-max_dx..=max_dx);
        let placed = place_mask(m, scale, dy, dx);
        if config.admits(&placed) {
            return Ok(placed);
        }
    }
    Err(Error::Validation(format!(
        "no placement within area bounds [{}, {}] after {} attempts",
        config.min_area_fraction, config.max_area_fraction, config.max_attempts
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Backend {
    Procedural,
    External(ExternalBackend),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Procedural => "procedural",
            Backend::External(_) => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalBackend {
    pub exchange_dir: PathBuf,
    pub poll_interval: Duration,
    pub timeout: Duration,
    pub drift_limit: f64,
}

impl ExternalBackend {
    pub fn new(exchange_dir: impl Into<PathBuf>) -> Self {
        Self {
            exchange_dir: exchange_dir.into(),
            poll_interval: Duration::from_millis(100),
            timeout: Duration::from_secs(600),
            drift_limit: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub id: String,
    pub source_id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn validate(&self, placement: &PlacementConfig) -> Result<()> {
        if (self.image.height(), self.image.width()) != self.mask.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.image.height(), self.image.width()],
                actual: vec![self.mask.height(), self.mask.width()],
            });
        }
        if self.mask.is_empty() {
            return Err(Error::Validation(format!("request {}: mask is empty", self.id)));
        }
        if !placement.admits(&self.mask) {
            return Err(Error::Validation(format!(
                "request {}: mask area fraction {:.4} outside [{}, {}]",
                self.id,
                self.mask.area_fraction(),
                placement.min_area_fraction,
                placement.max_area_fraction
            )));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::Validation(format!("request {}: empty prompt", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub image: RgbImage,
    pub label: BinaryMask,
    pub source_id: String,
    pub info: SynthesisInfo,
}

fn package(req: &GenerationRequest, image: RgbImage, backend: &str, prompt_index: usize) -> SyntheticSample {
    SyntheticSample {
        id: req.id.clone(),
        image,
        label: req.mask.clone(),
        source_id: req.source_id.clone(),
        info: SynthesisInfo {
            prompt: req.prompt.clone(),
            negative_prompt: req.negative_prompt.clone(),
            seed: req.seed,
            backend: backend.into(),
            prompt_index,
        },
    }
}

/// Appearance parameters keyed by the prompt text.
struct LesionStyle {
    tint: [f64; 3],
    opacity: f64,
    dome: f64,
    texture_freq: f64,
    texture_amp: f64,
}

impl LesionStyle {
    fn from_prompt(prompt: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(prompt_hash(prompt));
        Self {
            tint: [
                rng.random_range(0.85..0.99),
                rng.random_range(0.46..0.64),
                rng.random_range(0.34..0.52),
            ],
            opacity: rng.random_range(0.6..0.75),
            dome: rng.random_range(0.15..0.35),
            texture_freq: rng.random_range(6.0..18.0),
            texture_amp: rng.random_range(0.01..0.06),
        }
    }
}

/// Composites a textured lesion strictly inside the request mask. Pixels
/// outside the mask are copied from the canvas unchanged.
pub fn generate_procedural(req: &GenerationRequest) -> Result<SyntheticSample> {
    generate_procedural_with(req, &PlacementConfig::default(), 0)
}

fn generate_procedural_with(req: &GenerationRequest, placement: &PlacementConfig, prompt_index: usize) -> Result<SyntheticSample> {
    req.validate(placement)?;
    let style = LesionStyle::from_prompt(&req.prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed ^ prompt_hash(&req.prompt).rotate_left(17));
    let texture = LowFreqField::random(&mut rng, 6, style.texture_freq);
    let (h, w) = req.mask.shape();

    // Depth inside the lesion, from the distance to the nearest background pixel.
    let background: Vec<(usize, usize)> = (0..h * w)
        .filter(|i| !req.mask.get(i / w, i % w))
        .map(|i| (i / w, i % w))
        .collect();
    let depth = squared_distance_field(&background, h, w, PixelSpacing::default());
    let max_depth = (0..h * w)
        .filter(|i| req.mask.get(i / w, i % w))
        .map(|i| depth[i].sqrt())
        .fold(1.0f64, f64::max);

    let mut out = req.image.clone();
    for r in 0..h {
        for c in 0..w {
            if !req.mask.get(r, c) {
                continue;
            }
            let x = (depth[r * w + c].sqrt() / max_depth).min(1.0);
            let profile = 1.0 - (1.0 - x) * (1.0 - x);
            let alpha = style.opacity + (0.95 - style.opacity) * profile;
            let shade = 1.0 - style.dome + 2.0 * style.dome * profile
                + style.texture_amp * texture.at(r as f64 / h as f64, c as f64 / w as f64);
            let bg = req.image.pixel(r, c);
            let px: [f32; 3] = std::array::from_fn(|k| {
                ((1.0 - alpha) * bg[k] as f64 + alpha * style.tint[k] * shade) as f32
            });
            out.set_pixel(r, c, px);
        }
    }
    Ok(package(req, out, "procedural", prompt_index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeResponse {
    pub id: String,
    pub output_path: PathBuf,
    pub status: String,
}

pub const REQUESTS_DIR: &str = "requests";
pub const RESPONSES_DIR: &str = "responses";

/// Mean absolute difference over pixels outside `mask`, all channels.
pub fn out_of_mask_drift(a: &RgbImage, b: &RgbImage, mask: &BinaryMask) -> f64 {
    let (h, w) = mask.shape();
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                continue;
            }
            let (pa, pb) = (a.pixel(r, c), b.pixel(r, c));
            for k in 0..3 {
                sum += (pa[k] as f64 - pb[k] as f64).abs();
            }
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Hands the request to an out-of-process backend through the exchange
/// directory and validates its answer.
pub fn generate_external(req: &GenerationRequest, backend: &ExternalBackend) -> Result<SyntheticSample> {
    generate_external_with(req, backend, &PlacementConfig::default(), 0)
}

fn generate_external_with(
    req: &GenerationRequest,
    backend: &ExternalBackend,
    placement: &PlacementConfig,
    prompt_index: usize,
) -> Result<SyntheticSample> {
    req.validate(placement)?;
    let root = &backend.exchange_dir;
    let requests = root.join(REQUESTS_DIR);
    let responses = root.join(RESPONSES_DIR);
    for d in [&requests, &responses] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let image_rel = Path::new(REQUESTS_DIR).join(format!("{}_image.png", req.id));
    let mask_rel = Path::new(REQUESTS_DIR).join(format!("{}_mask.png", req.id));
    req.image.save_png(&root.join(&image_rel))?;
    req.mask.save_png(&root.join(&mask_rel))?;
    let record = ExchangeRequest {
        id: req.id.clone(),
        image_path: image_rel,
        mask_path: mask_rel,
        prompt: req.prompt.clone(),
        negative_prompt: req.negative_prompt.clone(),
        seed: req.seed,
    };
    // Write then rename so a polling backend never sees a partial record.
    let final_path = requests.join(format!("{}.json", req.id));
    let tmp = requests.join(format!(".{}.json.tmp", req.id));
    fs::write(&tmp, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;

    let response_path = responses.join(format!("{}.json", req.id));
    let start = Instant::now();
    let response: ExchangeResponse = loop {
        if response_path.exists() {
            let text = fs::read_to_string(&response_path).map_err(|e| Error::io(&response_path, e))?;
            break serde_json::from_str(&text)?;
        }
        if start.elapsed() >= backend.timeout {
            return Err(Error::BackendTimeout(backend.timeout, req.id.clone()));
        }
        thread::sleep(backend.poll_interval);
    };
    if response.id != req.id {
        return Err(Error::Validation(format!(
            "response for {} answers request {}",
            req.id, response.id
        )));
    }
    if response.status != "ok" {
        return Err(Error::Validation(format!(
            "backend reported status {:?} for {}",
            response.status, req.id
        )));
    }
    let output = RgbImage::load_png(&root.join(&response.output_path))?;
    if (output.height(), output.width()) != req.mask.shape() {
        return Err(Error::ShapeMismatch {
            expected: vec![req.mask.height(), req.mask.width(), 3],
            actual: vec![output.height(), output.width(), 3],
        });
    }
    let drift = out_of_mask_drift(&output, &req.image.quantized(), &req.mask);
    if drift > backend.drift_limit {
        log::warn!("rejecting {}: out-of-mask drift {drift:.4}", req.id);
        return Err(Error::OutOfMaskDrift {
            id: req.id.clone(),
            drift,
            limit: backend.drift_limit,
        });
    }
    Ok(package(req, output, "external", prompt_index))
}

pub fn generate(req: &GenerationRequest, backend: &Backend) -> Result<SyntheticSample> {
    match backend {
        Backend::Procedural => generate_procedural(req),
        Backend::External(b) => generate_external(req, b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub placement: PlacementConfig,
    /// Build fails when more than this fraction of requests is rejected.
    pub max_reject_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            placement: PlacementConfig::default(),
            max_reject_fraction: 0.10,
        }
    }
}

/// Adds `n_synth` synthetic records, written under `out_dir`, to the real
/// training records of `real`. Canvases are the lesion-free real training
/// images; placements come from the real training annotations; prompts are
/// assigned round-robin.
pub fn build_augmented_dataset(
    real: &DatasetManifest,
    n_synth: usize,
    bank: &PromptBank,
    seed: u64,
    backend: &Backend,
    out_dir: &Path,
    config: &AugmentConfig,
) -> Result<DatasetManifest> {
    bank.validate()?;
    let mut records: Vec<SampleRecord> = real
        .records
        .iter()
        .filter(|r| r.provenance == Provenance::Real)
        .cloned()
        .collect();
    let mut accepted = 0;
    let mut rejected = 0;
    if n_synth > 0 {
        let train: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
        let mut canvases = Vec::new();
        let mut pool = Vec::new();
        for r in &train {
            let s = load_record(real, r)?;
            if r.normal || s.mask.is_empty() {
                canvases.push((r.id.clone(), s.image));
            } else {
                pool.push(s.mask);
            }
        }
        if canvases.is_empty() {
            return Err(Error::Validation(
                "no lesion-free training image available as an inpainting canvas".into(),
            ));
        }
        let dir = out_dir.join("synthetic");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut synthetic = Vec::with_capacity(n_synth);
        for i in 0..n_synth {
            let (source_id, canvas) = canvases.choose(&mut rng).expect("non-empty");
            let mask = sample_mask_placement(&pool, &mut rng, &config.placement)?;
            let req = GenerationRequest {
                id: format!("synth_{i:05}"),
                source_id: source_id.clone(),
                image: canvas.clone(),
                mask,
                prompt: bank.prompt(i).to_string(),
                negative_prompt: bank.negative_prompt.clone(),
                seed: rng.random(),
            };
            let prompt_index = i % bank.len();
            let result = match backend {
                Backend::Procedural => generate_procedural_with(&req, &config.placement, prompt_index),
                Backend::External(b) => generate_external_with(&req, b, &config.placement, prompt_index),
            };
            let sample = match result {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("synthetic request {} rejected: {e}", req.id);
                    rejected += 1;
                    continue;
                }
            };
            let image_path = dir.join(format!("{}.png", sample.id));
            let mask_path = dir.join(format!("{}_mask.png", sample.id));
            sample.image.save_png(&image_path)?;
            sample.label.save_png(&mask_path)?;
            if BinaryMask::load_png(&mask_path)? != req.mask {
                return Err(Error::Validation(format!(
                    "{}: stored label differs from request mask",
                    sample.id
                )));
            }
            accepted += 1;
            synthetic.push(SampleRecord {
                id: sample.id,
                image: image_path,
                mask: mask_path,
                provenance: Provenance::Synthetic,
                split: Split::Train,
                normal: false,
                source_id: Some(sample.source_id),
                transform: None,
                synthesis: Some(sample.info),
            });
        }
        if rejected as f64 > config.max_reject_fraction * n_synth as f64 {
            return Err(Error::Validation(format!(
                "{rejected} of {n_synth} synthetic requests rejected (limit {:.0}%)",
                config.max_reject_fraction * 100.0
            )));
        }
        records.extend(synthetic);
    }
    let mut manifest = real.with_records(records);
    manifest.augmentation = Some(AugmentationHeader {
        kind: format!("text-guided/{}", backend.name()),
        requested: n_synth,
        accepted,
        rejected,
        prompt_bank_version: Some(bank.version.clone()),
    });
    Ok(manifest)
}

/// Appends rotated (90/180/270) and flipped copies of every real training
/// record, written under `out_dir`.
pub fn traditional_augment(real: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    let train: Vec<&SampleRecord> = real
        .records
        .iter()
        .filter(|r| r.provenance == Provenance::Real && r.split == Split::Train)
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyDataset("no real training records to augment".into()));
    }
    let dir = out_dir.join("traditional");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut records: Vec<SampleRecord> = real
        .records
        .iter()
        .filter(|r| r.provenance == Provenance::Real)
        .cloned()
        .collect();
    for r in train {
        let s = load_record(real, r)?;
        for tf in Dihedral::AUGMENTATIONS {
            let id = format!("{}_{}", r.id, tf.name());
            let image_path = dir.join(format!("{id}.png"));
            let mask_path = dir.join(format!("{id}_mask.png"));
            s.image.transformed(tf).save_png(&image_path)?;
            s.mask.transformed(tf).save_png(&mask_path)?;
            records.push(SampleRecord {
                id,
                image: image_path,
                mask: mask_path,
                provenance: Provenance::TraditionalAugmented,
                split: Split::Train,
                normal: r.normal,
                source_id: Some(r.id.clone()),
                transform: Some(tf.name().into()),
                synthesis: None,
            });
        }
    }
    let added = records.len() - real.records.iter().filter(|r| r.provenance == Provenance::Real).count();
    let mut manifest = real.with_records(records);
    manifest.augmentation = Some(AugmentationHeader {
        kind: "traditional".into(),
        requested: added,
        accepted: added,
        rejected: 0,
        prompt_bank_version: None,
    });
    Ok(manifest)
}
