//! JSON checkpoint format shared by backbone snapshots and prefix banks.
//!
//! One document per file: `format_version`, `kind`, `config`, `seed`,
//! `provenance` and an ordered `tensors` list whose `data` is base64 of
//! little-endian `f32`. Serialization is deterministic, so load → save is
//! byte-identical.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{DiffTensor, ParamStore, Real};
use crate::error::{Error, Result};

use super::backbone::{Backbone, Provenance};
use super::config::ModelConfig;
use super::prefix::PrefixBank;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Backbone,
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl TensorRecord {
    pub fn encode<F: Real>(name: &str, t: &DiffTensor<F>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        Self { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into(), data: STANDARD.encode(bytes) }
    }

    pub fn decode<F: Real>(&self) -> Result<DiffTensor<F>> {
        if self.dtype != "f32" {
            return Err(Error::Compatibility(format!("tensor {} has dtype {}, expected f32", self.name, self.dtype)));
        }
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Compatibility(format!("tensor {}: bad base64: {e}", self.name)))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Compatibility(format!("tensor {}: byte length {} not a multiple of 4", self.name, bytes.len())));
        }
        let data: Vec<F> = bytes
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        DiffTensor::new(self.shape.clone(), data)
            .map_err(|e| Error::Compatibility(format!("tensor {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub seed: u64,
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    fn from_store<F: Real>(kind: CheckpointKind, config: &ModelConfig, seed: u64, provenance: &str, store: &ParamStore<F>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            config: config.clone(),
            seed,
            provenance: provenance.to_string(),
            config_fingerprint: None,
            tensors: store.iter().map(|p| TensorRecord::encode(&p.name, &p.tensor)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes)?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format_version {}, this build reads {FORMAT_VERSION}",
                c.format_version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hash over tensor names and payloads.
    pub fn tensor_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update(t.data.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Serialized backbone parameters, the source every "fresh" backbone is
/// loaded from. Never contains prefix tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSnapshot {
    checkpoint: Checkpoint,
}

impl BackboneSnapshot {
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        if checkpoint.kind != CheckpointKind::Backbone {
            return Err(Error::Compatibility("checkpoint is not a backbone snapshot".into()));
        }
        if let Some(t) = checkpoint.tensors.iter().find(|t| t.name.starts_with("prefix.")) {
            return Err(Error::Compatibility(format!("backbone snapshot contains prefix tensor {}", t.name)));
        }
        Provenance::parse(&checkpoint.provenance)?;
        Ok(Self { checkpoint })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn config(&self) -> &ModelConfig {
        &self.checkpoint.config
    }

    pub fn seed(&self) -> u64 {
        self.checkpoint.seed
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::parse(&self.checkpoint.provenance).expect("validated on construction")
    }

    pub fn set_config_fingerprint(&mut self, fingerprint: Option<String>) {
        self.checkpoint.config_fingerprint = fingerprint;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.checkpoint.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Content hash of the parameters this snapshot restores, comparable
    /// with [`Backbone::content_hash`].
    pub fn param_hash(&self) -> Result<String> {
        Ok(self.restore::<f32>(self.config())?.content_hash())
    }

    /// Loads a backbone, failing when the snapshot was made for a different
    /// architecture than `expected`.
    pub fn restore<F: Real>(&self, expected: &ModelConfig) -> Result<Backbone<F>> {
        let stored = &self.checkpoint.config;
        if !expected.backbone_compatible(stored) {
            return Err(Error::Compatibility(format!(
                "snapshot built for {stored:?}, cannot load under {expected:?}"
            )));
        }
        let mut remaining: std::collections::HashMap<&str, &TensorRecord> =
            self.checkpoint.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let backbone = Backbone::from_named(
            expected,
            &mut |name, shape| {
                let rec = remaining
                    .remove(name)
                    .ok_or_else(|| Error::Compatibility(format!("snapshot lacks tensor {name}")))?;
                if rec.shape != shape {
                    return Err(Error::Compatibility(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        rec.shape
                    )));
                }
                rec.decode()
            },
            self.checkpoint.seed,
            self.provenance(),
        )?;
        if let Some(name) = remaining.keys().next() {
            return Err(Error::Compatibility(format!("snapshot has unexpected tensor {name}")));
        }
        Ok(backbone)
    }
}

impl<F: Real> Backbone<F> {
    pub fn snapshot(&self) -> BackboneSnapshot {
        BackboneSnapshot {
            checkpoint: Checkpoint::from_store(
                CheckpointKind::Backbone,
                self.config(),
                self.seed(),
                self.provenance().as_str(),
                self.params(),
            ),
        }
    }
}

impl<F: Real> PrefixBank<F> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CheckpointKind::Prefix, self.config(), self.seed(), self.provenance(), self.params())
    }

    /// Loads a prefix bank for use with a backbone of `expected` shape. A
    /// prefix length mismatch names both lengths.
    pub fn from_checkpoint(checkpoint: &Checkpoint, expected: &ModelConfig) -> Result<Self> {
        if checkpoint.kind != CheckpointKind::Prefix {
            return Err(Error::Compatibility("checkpoint is not a prefix bank".into()));
        }
        let stored = &checkpoint.config;
        if stored.prefix_length != expected.prefix_length {
            return Err(Error::Compatibility(format!(
                "prefix length {} in checkpoint, {} expected",
                stored.prefix_length, expected.prefix_length
            )));
        }
        if !expected.backbone_compatible(stored) {
            return Err(Error::Compatibility(format!(
                "prefix built for {stored:?}, cannot attach to {expected:?}"
            )));
        }
        let tensors = checkpoint
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), t.decode()?)))
            .collect::<Result<Vec<_>>>()?;
        PrefixBank::from_tensors(expected, tensors, checkpoint.seed, checkpoint.provenance.clone())
    }
}
