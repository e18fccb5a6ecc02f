//! Self-describing weight container.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! every tensor as little-endian f32 in header order. The header records the
//! architecture, seed, training settings and a SHA-256 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use objectcompose_core::tensor::Tensor;
use objectcompose_core::toy::text::TextConfig;
use objectcompose_core::toy::train::{TrainConfig, TrainReport};
use objectcompose_core::toy::{ToyBackends, ToyConfig};

use crate::error::{write_atomic, Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"OCWGHT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub image_size: usize,
    pub latent_channels: usize,
    pub ae_hidden: usize,
    pub vocab_buckets: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    pub denoiser_width: usize,
    pub embed_dim: usize,
    pub classifier_width: usize,
    pub num_classes: usize,
}

impl From<ToyConfig> for ConfigRecord {
    fn from(c: ToyConfig) -> Self {
        Self {
            image_size: c.image_size,
            latent_channels: c.latent_channels,
            ae_hidden: c.ae_hidden,
            vocab_buckets: c.text.vocab_buckets,
            text_tokens: c.text.tokens,
            text_dim: c.text.dim,
            denoiser_width: c.denoiser_width,
            embed_dim: c.embed_dim,
            classifier_width: c.classifier_width,
            num_classes: c.num_classes,
        }
    }
}

impl From<ConfigRecord> for ToyConfig {
    fn from(c: ConfigRecord) -> Self {
        Self {
            image_size: c.image_size,
            latent_channels: c.latent_channels,
            ae_hidden: c.ae_hidden,
            text: TextConfig { vocab_buckets: c.vocab_buckets, tokens: c.text_tokens, dim: c.text_dim },
            denoiser_width: c.denoiser_width,
            embed_dim: c.embed_dim,
            classifier_width: c.classifier_width,
            num_classes: c.num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub train_scenes: usize,
    pub validation_scenes: usize,
    pub dilation_radius: usize,
    pub ae_epochs: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub clf_steps: usize,
    pub clf_batch: usize,
    pub clf_lr: f64,
    pub den_steps: usize,
    pub den_batch: usize,
    pub den_lr: f64,
    pub text_drop: f64,
}

impl From<&TrainConfig> for TrainRecord {
    fn from(t: &TrainConfig) -> Self {
        Self {
            seed: t.seed,
            train_scenes: t.train_scenes,
            validation_scenes: t.validation_scenes,
            dilation_radius: t.dilation_radius,
            ae_epochs: t.ae_epochs,
            ae_batch: t.ae_batch,
            ae_lr: t.ae_lr,
            clf_steps: t.clf_steps,
            clf_batch: t.clf_batch,
            clf_lr: t.clf_lr,
            den_steps: t.den_steps,
            den_batch: t.den_batch,
            den_lr: t.den_lr,
            text_drop: t.text_drop,
        }
    }
}

impl From<TrainRecord> for TrainConfig {
    fn from(t: TrainRecord) -> Self {
        Self {
            seed: t.seed,
            train_scenes: t.train_scenes,
            validation_scenes: t.validation_scenes,
            dilation_radius: t.dilation_radius,
            ae_epochs: t.ae_epochs,
            ae_batch: t.ae_batch,
            ae_lr: t.ae_lr,
            clf_steps: t.clf_steps,
            clf_batch: t.clf_batch,
            clf_lr: t.clf_lr,
            den_steps: t.den_steps,
            den_batch: t.den_batch,
            den_lr: t.den_lr,
            text_drop: t.text_drop,
        }
    }
}

/// Training outcome stored with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train: TrainRecord,
    pub ae_validation_mse: f64,
    pub classifier_validation_accuracy: f64,
    pub denoiser_loss_conditional: f64,
    pub denoiser_loss_unconditional: f64,
    pub denoiser_loss_zero: f64,
    pub stage_seconds: Vec<(String, f64)>,
}

impl Provenance {
    pub fn new(train: &TrainConfig, report: &TrainReport, stage_seconds: Vec<(String, f64)>) -> Self {
        Self {
            train: train.into(),
            ae_validation_mse: report.ae_validation_mse,
            classifier_validation_accuracy: report.classifier_validation_accuracy,
            denoiser_loss_conditional: report.denoiser_loss_conditional,
            denoiser_loss_unconditional: report.denoiser_loss_unconditional,
            denoiser_loss_zero: report.denoiser_loss_zero,
            stage_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format_version: u32,
    pub seed: u64,
    pub config: ConfigRecord,
    pub provenance: Option<Provenance>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_weights(backends: &ToyBackends<f32>, provenance: Option<Provenance>) -> Result<Vec<u8>> {
    let named = backends.named_tensors();
    let mut payload = Vec::with_capacity(named.iter().map(|(_, t)| 4 * t.len()).sum());
    for (_, t) in &named {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = WeightsHeader {
        format_version: FORMAT_VERSION,
        seed: backends.seed,
        config: backends.config.into(),
        provenance,
        tensors: named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_weights(path: &Path, backends: &ToyBackends<f32>, provenance: Option<Provenance>) -> Result<()> {
    write_atomic(path, &encode_weights(backends, provenance)?)
}

pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<(ToyBackends<f32>, WeightsHeader)> {
    let bad = |m: &str| Error::Format { path: path.to_path_buf(), message: m.to_string() };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weight file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: WeightsHeader = serde_json::from_slice(json).at(path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    let payload = &bytes[16 + hlen..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let mut named = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let chunk = payload.get(off..off + 4 * n).ok_or_else(|| bad("truncated payload"))?;
        let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        named.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
        off += 4 * n;
    }
    if off != payload.len() {
        return Err(bad("trailing payload bytes"));
    }
    let backends = ToyBackends::from_named(header.config.into(), header.seed, &named)?;
    Ok((backends, header))
}

pub fn load_weights(path: &Path) -> Result<(ToyBackends<f32>, WeightsHeader)> {
    let bytes = std::fs::read(path).at(path)?;
    decode_weights(path, &bytes)
}
