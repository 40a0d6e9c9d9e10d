use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub task_id: String,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_id: String,
    pub metric_name: String,
    pub value: f64,
}

/// Backbone state observed when a source task begins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSwitch {
    pub epoch: usize,
    pub task_id: String,
    pub step: usize,
    pub backbone_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_fingerprint: String,
    pub seeds: BTreeMap<String, u64>,
    pub tags: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evals: Vec<EvalResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task_switches: Vec<TaskSwitch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_order: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_examples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_provenance: Option<String>,
    /// Excluded from serialization so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn new(config_fingerprint: impl Into<String>) -> Self {
        Self { config_fingerprint: config_fingerprint.into(), ..Self::default() }
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    pub fn push_step(&mut self, epoch: usize, task_id: &str, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {} of task {task_id}", self.steps.len())));
        }
        let step = self.steps.len();
        self.steps.push(StepRecord { epoch, task_id: task_id.to_string(), step, loss });
        Ok(())
    }

    pub fn push_epoch(&mut self, epoch: usize, task_id: &str, metric_name: &str, value: f64) {
        self.epochs.push(EpochRecord { epoch, task_id: task_id.to_string(), metric_name: metric_name.into(), value });
    }

    /// Values of one per-epoch metric, in epoch order.
    pub fn epoch_trace(&self, metric_name: &str) -> Vec<f64> {
        self.epochs.iter().filter(|e| e.metric_name == metric_name).map(|e| e.value).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Wraps `cause` together with this partial report.
    pub fn abort(&self, cause: Error) -> Error {
        Error::Aborted { cause: Box::new(cause), report: self.to_json() }
    }
}
