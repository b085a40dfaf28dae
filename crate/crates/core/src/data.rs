//! Dataset manifests, the procedural toy corpus, directory loading and the
//! fold protocol.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, RgbImage};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Real,
    Synthetic,
    TraditionalAugmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Generation details for a synthetic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisInfo {
    pub prompt: String,
    pub negative_prompt: String,
    pub seed: u64,
    pub backend: String,
    pub prompt_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the manifest root unless absolute.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub provenance: Provenance,
    pub split: Split,
    /// Lesion-free; usable as an inpainting canvas.
    pub normal: bool,
    /// Real record this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisInfo>,
}

/// Summary of how a manifest was augmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationHeader {
    pub kind: String,
    pub requested: usize,
    pub accepted: usize,
    pub rejected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_bank_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationHeader>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            root: root.into(),
            records,
            augmentation: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self {
            format_version: self.format_version,
            root: self.root.clone(),
            records,
            augmentation: self.augmentation.clone(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Self {
        self.with_records(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn split(&self, split: Split) -> Self {
        self.filter(|r| r.split == split)
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.records.iter().filter(|r| r.provenance == provenance).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Checks every referenced file: existence, binary masks, matching shapes.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            load_record(self, r)?;
        }
        Ok(())
    }

    /// SHA-256 over record metadata and file contents.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r)?);
            for p in [&r.image, &r.mask] {
                let path = self.resolve(p);
                h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

pub fn load_record(manifest: &DatasetManifest, r: &SampleRecord) -> Result<Sample> {
    let image_path = manifest.resolve(&r.image);
    let mask_path = manifest.resolve(&r.mask);
    for p in [&image_path, &mask_path] {
        if !p.exists() {
            return Err(Error::MissingPair(p.clone()));
        }
    }
    let image = RgbImage::load_png(&image_path)?;
    let mask = BinaryMask::load_png(&mask_path)?;
    if (image.height(), image.width()) != mask.shape() {
        return Err(Error::Validation(format!(
            "{}: image {}x{} but mask {}x{}",
            r.id,
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(Sample {
        id: r.id.clone(),
        image,
        mask,
        provenance: r.provenance,
    })
}

pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest.records.iter().map(|r| load_record(manifest, r)).collect()
}

/// One toy lesion: an irregular blob with a dome-shaped colour profile.
#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    stretch: f64,
    angle: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let radius = rng.random_range(0.07..0.2) * s;
        let margin = radius * 0.6;
        Self {
            cy: rng.random_range(margin..s - margin),
            cx: rng.random_range(margin..s - margin),
            radius,
            stretch: rng.random_range(0.75..1.3),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            harmonics: [
                (rng.random_range(0.0..0.12), rng.random_range(0.0..6.3)),
                (rng.random_range(0.0..0.08), rng.random_range(0.0..6.3)),
                (rng.random_range(0.0..0.05), rng.random_range(0.0..6.3)),
            ],
        }
    }

    /// Normalised radial coordinate; inside when `< 1`.
    fn level(&self, r: usize, c: usize) -> f64 {
        let dy = r as f64 + 0.5 - self.cy;
        let dx = c as f64 + 0.5 - self.cx;
        let (s, co) = self.angle.sin_cos();
        let u = (dx * co + dy * s) / self.stretch;
        let v = (-dx * s + dy * co) * self.stretch;
        let theta = v.atan2(u);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, (a, p))| a * ((k as f64 + 2.0) * theta + p).cos())
            .sum();
        (u * u + v * v).sqrt() / (self.radius * (1.0 + wobble))
    }
}

/// Smooth low-frequency field in roughly `[-1, 1]`.
pub(crate) struct LowFreqField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl LowFreqField {
    pub(crate) fn random<R: Rng>(rng: &mut R, count: usize, max_freq: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                (
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        Self { waves }
    }

    pub(crate) fn at(&self, y: f64, x: f64) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves
            .iter()
            .map(|(fy, fx, p, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + p).cos())
            .sum::<f64>()
            / norm.max(1e-9)
    }
}

/// Procedural tissue background: tinted low-frequency colour field with a
/// vignette.
pub fn render_tissue<R: Rng>(rng: &mut R, size: usize) -> RgbImage {
    let base = [
        rng.random_range(0.62..0.78),
        rng.random_range(0.30..0.42),
        rng.random_range(0.28..0.40),
    ];
    let fields: Vec<LowFreqField> = (0..3).map(|_| LowFreqField::random(rng, 3, 2.0)).collect();
    let texture = LowFreqField::random(rng, 6, 9.0);
    let (vy, vx) = (rng.random_range(0.4..0.6), rng.random_range(0.4..0.6));
    let strength = rng.random_range(0.35..0.6);
    let s = size as f64;
    let mut img = RgbImage::filled(size, size, [0.0; 3]);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
            let d2 = (y - vy).powi(2) + (x - vx).powi(2);
            let vignette = 1.0 - strength * d2 / 0.5;
            let t = 0.025 * texture.at(y, x);
            let px: [f32; 3] = std::array::from_fn(|k| {
                ((base[k] + 0.07 * fields[k].at(y, x) + t) * vignette) as f32
            });
            img.set_pixel(r, c, px);
        }
    }
    img
}

pub const MIN_LESION_FRACTION: f64 = 0.005;
pub const MAX_LESION_FRACTION: f64 = 0.30;

/// One toy image with 0–2 lesions and the exact lesion support as its mask.
pub fn render_toy_sample<R: Rng>(rng: &mut R, size: usize) -> (RgbImage, BinaryMask) {
    let mut image = render_tissue(rng, size);
    let n_lesions = match rng.random_range(0..4) {
        0 => 0,
        3 => 2,
        _ => 1,
    };
    if n_lesions == 0 {
        return (image, BinaryMask::empty(size, size));
    }
    let (blobs, mask) = loop {
        let blobs: Vec<Blob> = (0..n_lesions).map(|_| Blob::random(rng, size)).collect();
        let mask = BinaryMask::from_fn(size, size, |r, c| blobs.iter().any(|b| b.level(r, c) < 1.0));
        let frac = mask.area_fraction();
        if (MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&frac) {
            break (blobs, mask);
        }
    };
    let tint = [
        rng.random_range(0.88..0.98),
        rng.random_range(0.50..0.62),
        rng.random_range(0.38..0.50),
    ];
    let speckle = LowFreqField::random(rng, 5, 14.0);
    let s = size as f64;
    for r in 0..size {
        for c in 0..size {
            if !mask.get(r, c) {
                continue;
            }
            let level = blobs
                .iter()
                .map(|b| b.level(r, c))
                .fold(f64::INFINITY, f64::min);
            let dome = (1.0 - level * level).max(0.0);
            let alpha = 0.65 + 0.3 * dome;
            let shade = 0.85 + 0.2 * dome + 0.04 * speckle.at(r as f64 / s, c as f64 / s);
            let bg = image.pixel(r, c);
            let px: [f32; 3] = std::array::from_fn(|k| {
                ((1.0 - alpha) * bg[k] as f64 + alpha * tint[k] * shade) as f32
            });
            image.set_pixel(r, c, px);
        }
    }
    (image, mask)
}

/// Renders `n_images` toy samples into `root/images` and `root/masks` and
/// writes `root/manifest.json`. All records are tagged as training data.
pub fn make_toy_dataset(root: &Path, n_images: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(Error::Validation("toy dataset needs at least one image".into()));
    }
    let images = root.join("images");
    let masks = root.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let (image, mask) = render_toy_sample(&mut rng, size);
        let name = format!("toy_{i:05}.png");
        image.save_png(&images.join(&name))?;
        mask.save_png(&masks.join(&name))?;
        records.push(SampleRecord {
            id: format!("toy_{i:05}"),
            image: PathBuf::from("images").join(&name),
            mask: PathBuf::from("masks").join(&name),
            provenance: Provenance::Real,
            split: Split::Train,
            normal: mask.is_empty(),
            source_id: None,
            transform: None,
            synthesis: None,
        });
    }
    let manifest = DatasetManifest::new(root, records);
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "bmp", "jpg", "jpeg"];

/// Builds a manifest from `root/images` and `root/masks`, pairing files by
/// stem. Every pair is decoded and validated.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest> {
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        if !dir.is_dir() {
            return Err(Error::Validation(format!("{} is not a directory", dir.display())));
        }
        let mut out: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        out.sort();
        Ok(out)
    };
    let images = list(&root.join("images"))?;
    let masks = list(&root.join("masks"))?;
    if images.is_empty() && masks.is_empty() {
        return Err(Error::EmptyDataset(root.display().to_string()));
    }
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut records = Vec::with_capacity(images.len());
    for img in &images {
        let s = stem(img).unwrap_or_default();
        let mask = masks
            .iter()
            .find(|m| stem(m).as_deref() == Some(s.as_str()))
            .ok_or_else(|| Error::MissingPair(img.clone()))?;
        records.push(SampleRecord {
            id: s,
            image: img.strip_prefix(root).unwrap_or(img).to_path_buf(),
            mask: mask.strip_prefix(root).unwrap_or(mask).to_path_buf(),
            provenance: Provenance::Real,
            split: Split::Train,
            normal: false,
            source_id: None,
            transform: None,
            synthesis: None,
        });
    }
    if let Some(orphan) = masks.iter().find(|m| {
        let s = stem(m);
        !images.iter().any(|i| stem(i) == s)
    }) {
        return Err(Error::MissingPair(orphan.clone()));
    }
    let mut manifest = DatasetManifest::new(root, records);
    for i in 0..manifest.records.len() {
        let sample = load_record(&manifest, &manifest.records[i])?;
        manifest.records[i].normal = sample.mask.is_empty();
    }
    Ok(manifest)
}

/// Marks `n_test` real records (seeded choice) as the untouched test split.
pub fn assign_test_split(manifest: &DatasetManifest, n_test: usize, seed: u64) -> Result<DatasetManifest> {
    let mut real: Vec<usize> = (0..manifest.len())
        .filter(|i| manifest.records[*i].provenance == Provenance::Real)
        .collect();
    if n_test >= real.len() {
        return Err(Error::Validation(format!(
            "test split of {n_test} leaves no training data out of {} real records",
            real.len()
        )));
    }
    real.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: HashSet<usize> = real.into_iter().take(n_test).collect();
    let mut out = manifest.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        r.split = if test.contains(&i) { Split::Test } else { Split::Train };
    }
    Ok(out)
}

/// Keeps the test split and a seeded subsample of `n` real training records;
/// derived records are dropped.
pub fn subsample_training(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<DatasetManifest> {
    let mut train: Vec<usize> = (0..manifest.len())
        .filter(|i| {
            let r = &manifest.records[*i];
            r.provenance == Provenance::Real && r.split == Split::Train
        })
        .collect();
    if n > train.len() {
        return Err(Error::Validation(format!(
            "cannot subsample {n} of {} training records",
            train.len()
        )));
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep: HashSet<usize> = train.into_iter().take(n).collect();
    Ok(manifest.with_records(
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| keep.contains(i) || (r.split == Split::Test && r.provenance == Provenance::Real))
            .map(|(_, r)| r.clone())
            .collect(),
    ))
}

#[derive(Debug, Clone)]
pub struct Fold {
    pub index: usize,
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
}

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

/// Partitions the real training records into `k` validation folds. Derived
/// records (synthetic or geometric copies) only ever join training splits,
/// and are dropped from a fold when their source is in its validation part.
/// Test-split records are never used.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Fold>> {
    kfold_split_with_holdout(manifest, k, seed, DEFAULT_HOLDOUT_FRACTION)
}

pub fn kfold_split_with_holdout(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
    holdout_fraction: f64,
) -> Result<Vec<Fold>> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let mut real: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.provenance == Provenance::Real && r.split == Split::Train)
        .collect();
    let derived: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.provenance != Provenance::Real && r.split == Split::Train)
        .collect();
    if k > real.len() || (k == 1 && real.len() < 2) {
        return Err(Error::Validation(format!(
            "{k} folds requested but only {} real training records",
            real.len()
        )));
    }
    real.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let groups: Vec<Vec<&SampleRecord>> = if k == 1 {
        let n_val = ((real.len() as f64 * holdout_fraction).round() as usize).clamp(1, real.len() - 1);
        vec![real[..n_val].to_vec()]
    } else {
        let mut g = vec![Vec::new(); k];
        for (i, r) in real.iter().enumerate() {
            g[i % k].push(*r);
        }
        g
    };

    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(index, val)| {
            let val_ids: HashSet<&str> = val.iter().map(|r| r.id.as_str()).collect();
            let mut train: Vec<SampleRecord> = real
                .iter()
                .filter(|r| !val_ids.contains(r.id.as_str()))
                .map(|r| (*r).clone())
                .collect();
            train.extend(
                derived
                    .iter()
                    .filter(|r| {
                        r.source_id
                            .as_deref()
                            .is_none_or(|s| !val_ids.contains(s))
                    })
                    .map(|r| (*r).clone()),
            );
            Fold {
                index,
                train: manifest.with_records(train),
                validation: manifest.with_records(val.into_iter().cloned().collect()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_masks_respect_area_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut normals = 0;
        for _ in 0..300 {
            let (img, mask) = render_toy_sample(&mut rng, 64);
            assert_eq!((img.height(), img.width()), (64, 64));
            if mask.is_empty() {
                normals += 1;
            } else {
                let f = mask.area_fraction();
                assert!((MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&f), "{f}");
            }
        }
        assert!(normals > 30 && normals < 150, "{normals}");
    }

    #[test]
    fn lesion_pixels_differ_from_tissue() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (img, mask) = loop {
            let s = render_toy_sample(&mut rng, 64);
            if !s.1.is_empty() {
                break s;
            }
        };
        let mean = |inside: bool| {
            let px: Vec<f32> = (0..64 * 64)
                .filter(|i| mask.get(i / 64, i % 64) == inside)
                .map(|i| img.pixel(i / 64, i % 64)[1])
                .collect();
            px.iter().sum::<f32>() / px.len() as f32
        };
        assert!(mean(true) > mean(false) + 0.05);
    }
}
