use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PrefixEncoderShape};
use crate::training::{PretrainPlan, SourceTrainPlan, TargetPlan, VisitOrder};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Defaults to the size of the built vocabulary.
    pub vocab_size: Option<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub prefix_length: usize,
    pub dropout_rate: f64,
    /// Train the prefix through the reparameterization encoder.
    pub prefix_encoder: bool,
    /// Encoder hidden width; defaults to `2 · d_model`.
    pub prefix_hidden: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            vocab_size: None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_encoder_layers: m.n_encoder_layers,
            n_decoder_layers: m.n_decoder_layers,
            d_ff: m.d_ff,
            max_source_len: m.max_source_len,
            max_target_len: m.max_target_len,
            prefix_length: m.prefix_length,
            dropout_rate: m.dropout_rate,
            prefix_encoder: true,
            prefix_hidden: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_len: usize) -> Result<ModelConfig> {
        let vocab_size = self.vocab_size.unwrap_or(vocab_len);
        if vocab_size < vocab_len {
            return Err(Error::Config(format!("model.vocab_size {vocab_size} is smaller than the vocabulary ({vocab_len})")));
        }
        let config = ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            d_ff: self.d_ff,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
            prefix_length: self.prefix_length,
            dropout_rate: self.dropout_rate,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn encoder_shape(&self) -> Option<PrefixEncoderShape> {
        self.prefix_encoder
            .then(|| PrefixEncoderShape { embed_dim: self.d_model, hidden: self.prefix_hidden.unwrap_or(2 * self.d_model) })
    }
}

/// A user-provided dataset: a directory holding `train.jsonl`,
/// `dev.jsonl` and `test.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlDataset {
    pub task_id: String,
    pub kind: TaskKind,
    pub source_language: String,
    #[serde(default)]
    pub target_language: Option<String>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    /// Generate the six mini-language corpora.
    pub generate: bool,
    pub alpha_train: usize,
    pub beta_train: usize,
    pub dev: usize,
    pub test: usize,
    /// Per-task train sizes that replace `alpha_train` / `beta_train`.
    pub train_overrides: BTreeMap<String, usize>,
    pub jsonl: Vec<JsonlDataset>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { seed: 0, generate: true, alpha_train: 8000, beta_train: 1200, dev: 200, test: 200, train_overrides: BTreeMap::new(), jsonl: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainPlan::default();
        Self { seed: 1000, steps: p.steps, batch_size: p.batch_size, lr: p.lr, mask_rate: p.mask_rate }
    }
}

impl PretrainSection {
    pub fn plan(&self) -> PretrainPlan {
        PretrainPlan { steps: self.steps, batch_size: self.batch_size, lr: self.lr, mask_rate: self.mask_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub prefix_lr: Option<f64>,
    /// Empty means a fresh shuffle every epoch.
    pub order: Vec<String>,
    pub dev_limit: usize,
}

impl Default for SourceSection {
    fn default() -> Self {
        let p = SourceTrainPlan::default();
        Self {
            epochs: p.epochs,
            batches_per_epoch: p.batches_per_epoch,
            batch_size: p.batch_size,
            lr: p.lr,
            prefix_lr: p.prefix_lr,
            order: Vec::new(),
            dev_limit: p.dev_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dev_limit: usize,
    pub test_limit: usize,
}

impl Default for TargetSection {
    fn default() -> Self {
        let p = TargetPlan::default();
        Self { epochs: p.epochs, batch_size: p.batch_size, lr: p.lr, dev_limit: p.dev_limit, test_limit: p.test_limit }
    }
}

impl TargetSection {
    pub fn plan(&self) -> TargetPlan {
        TargetPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dev_limit: self.dev_limit,
            test_limit: self.test_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub delta: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    /// Subsampling rate of the low-resource suite.
    pub rate: f64,
    /// Target settings for the low-resource suite; defaults to `[target]`.
    pub low_resource_target: Option<TargetSection>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self { rate: 0.10, low_resource_target: None }
    }
}

/// Every knob of an experiment, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub target: TargetSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub suite: SuiteSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            source: SourceSection::default(),
            target: TargetSection::default(),
            sampler: SamplerSection::default(),
            suite: SuiteSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file. Relative `output_dir` and dataset paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        for d in &mut cfg.data.jsonl {
            if d.dir.is_relative() {
                d.dir = base.join(&d.dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !self.data.generate && self.data.jsonl.is_empty() {
            return Err(Error::Config("data: nothing to load (generate = false and no jsonl datasets)".into()));
        }
        if !(self.suite.rate > 0.0 && self.suite.rate <= 1.0) {
            return Err(Error::Config(format!("suite.rate {} outside (0, 1]", self.suite.rate)));
        }
        if self.sampler.delta <= 0.0 {
            return Err(Error::Config("sampler.delta must be > 0".into()));
        }
        self.target.plan().validate()
    }

    /// SHA-256 of the canonical JSON form (object keys sorted). Paths are
    /// included as written.
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn source_plan(&self, order: Option<Vec<String>>) -> SourceTrainPlan {
        let order = match order {
            Some(o) => VisitOrder::Fixed(o),
            None if !self.source.order.is_empty() => VisitOrder::Fixed(self.source.order.clone()),
            None => VisitOrder::Shuffled,
        };
        SourceTrainPlan {
            epochs: self.source.epochs,
            batches_per_epoch: self.source.batches_per_epoch,
            batch_size: self.source.batch_size,
            lr: self.source.lr,
            prefix_lr: self.source.prefix_lr,
            delta: self.sampler.delta,
            order,
            dev_limit: self.source.dev_limit,
        }
    }

    pub fn pretrain_plan(&self) -> PretrainPlan {
        self.pretrain.plan()
    }

    pub fn target_plan(&self) -> TargetPlan {
        self.target.plan()
    }
}
