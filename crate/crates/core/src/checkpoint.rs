//! Safetensors persistence for codecs and trained models. Configuration,
//! step counter and parameter digests travel in the file metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecParams};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pipeline::{SegModel, Trainer, TrainingConfig};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "latentseg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub encoder: String,
    pub decoder: String,
    pub condition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecHeader {
    pub format_version: u32,
    pub kind: String,
    pub codec: CodecConfig,
    pub latent_scale: f64,
    pub digests: Digests,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub kind: String,
    pub codec: CodecConfig,
    pub latent_scale: f64,
    pub training: TrainingConfig,
    pub step: usize,
    pub digests: Digests,
}

fn write(path: &Path, tensors: BTreeMap<String, Tensor>, header: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(header)?)]);
    safetensors::serialize_to_file(tensors.iter(), Some(meta), path)?;
    Ok(())
}

fn read<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(BTreeMap<String, Tensor>, H)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no header", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version:?}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let found = raw.get("kind").and_then(|v| v.as_str()).unwrap_or_default();
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {found} checkpoint, expected {kind}",
            path.display()
        )));
    }
    let header = serde_json::from_value(raw)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok((tensors, header))
}

fn take_prefixed(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
        .collect()
}

fn store(tensors: BTreeMap<String, Tensor>, expected_digest: &str, what: &str) -> Result<ParamStore> {
    let s = ParamStore::from_tensors(tensors, DType::F32, &Device::Cpu)?;
    let d = s.digest()?;
    if d != expected_digest {
        return Err(Error::Checkpoint(format!(
            "{what} digest mismatch: header {expected_digest}, contents {d}"
        )));
    }
    Ok(s)
}

fn codec_tensors(codec: &CodecParams, out: &mut BTreeMap<String, Tensor>) {
    for (prefix, s) in [
        ("encoder.", &codec.encoder),
        ("decoder.", &codec.decoder),
        ("condition.", &codec.condition),
    ] {
        out.extend(s.tensors().into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)));
    }
}

fn codec_digests(codec: &CodecParams) -> Result<Digests> {
    Ok(Digests {
        encoder: codec.encoder.digest()?,
        decoder: codec.decoder.digest()?,
        condition: codec.condition.digest()?,
        denoiser: None,
    })
}

fn restore_codec(
    tensors: &BTreeMap<String, Tensor>,
    config: CodecConfig,
    latent_scale: f64,
    digests: &Digests,
) -> Result<CodecParams> {
    config.validate()?;
    Ok(CodecParams {
        encoder: store(take_prefixed(tensors, "encoder."), &digests.encoder, "encoder")?,
        decoder: store(take_prefixed(tensors, "decoder."), &digests.decoder, "decoder")?,
        condition: store(take_prefixed(tensors, "condition."), &digests.condition, "condition encoder")?,
        config,
        latent_scale,
    })
}

pub fn save_codec(path: &Path, codec: &CodecParams) -> Result<()> {
    let mut tensors = BTreeMap::new();
    codec_tensors(codec, &mut tensors);
    let header = CodecHeader {
        format_version: FORMAT_VERSION,
        kind: "codec".into(),
        codec: codec.config.clone(),
        latent_scale: codec.latent_scale,
        digests: codec_digests(codec)?,
    };
    write(path, tensors, &header)
}

pub fn load_codec(path: &Path) -> Result<CodecParams> {
    let (tensors, h): (_, CodecHeader) = read(path, "codec")?;
    restore_codec(&tensors, h.codec, h.latent_scale, &h.digests)
}

/// A trained model plus the optimizer state needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SegModel,
    pub step: usize,
    pub optimizer: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Result<Self> {
        Ok(Self {
            model: trainer.model()?,
            step: trainer.step(),
            optimizer: trainer.optimizer().state_tensors(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        codec_tensors(&self.model.codec, &mut tensors);
        tensors.extend(
            self.model
                .denoiser
                .tensors()
                .into_iter()
                .map(|(k, v)| (format!("denoiser.{k}"), v)),
        );
        tensors.extend(
            self.optimizer
                .iter()
                .map(|(k, v)| (format!("optim.{k}"), v.clone())),
        );
        let mut digests = codec_digests(&self.model.codec)?;
        digests.denoiser = Some(self.model.denoiser.digest()?);
        let header = ModelHeader {
            format_version: FORMAT_VERSION,
            kind: "model".into(),
            codec: self.model.codec.config.clone(),
            latent_scale: self.model.codec.latent_scale,
            training: self.model.training.clone(),
            step: self.step,
            digests,
        };
        write(path, tensors, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, h): (_, ModelHeader) = read(path, "model")?;
        let codec = restore_codec(&tensors, h.codec, h.latent_scale, &h.digests)?;
        let denoiser_digest = h
            .digests
            .denoiser
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("missing denoiser digest".into()))?;
        let denoiser = store(take_prefixed(&tensors, "denoiser."), denoiser_digest, "denoiser")?;
        h.training.validate()?;
        Ok(Self {
            model: SegModel {
                codec,
                denoiser,
                training: h.training,
            },
            step: h.step,
            optimizer: take_prefixed(&tensors, "optim."),
        })
    }
}
