//! Source-task training with fresh backbones, target-task specification,
//! and the experiment drivers built on them.

mod pretrain;
mod report;
mod sampler;
mod source;
mod target;

pub use pretrain::{pretrain_base, PretrainPlan};
pub use report::{EpochRecord, StepRecord, TaskSwitch, TrainReport};
pub use sampler::{plan_epoch, sampling_distribution, SamplerState};
pub use source::{order_experiment, sample_std, train_source, OrderRow, OrderTable};
pub use target::{ablate_random_prefix, low_resource_run, specify_target, TargetOutcome, ABLATION_TAG, SUPPORTED_RATES};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::AdamState;
use crate::data::{Corpus, Example, PAD};
use crate::error::{Error, Result};
use crate::model::{batch_loss, loss_and_grads, Backbone, Batch, Mode, PrefixBank};
use crate::rng::Rng;

/// How source tasks are ordered within an epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisitOrder {
    Shuffled,
    Fixed(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTrainPlan {
    pub epochs: usize,
    /// Batches per epoch, split across tasks.
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Prefix learning rate; `None` uses `lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_lr: Option<f64>,
    pub delta: f64,
    pub order: VisitOrder,
    /// Dev examples per task scored for the per-epoch dev loss.
    pub dev_limit: usize,
}

impl Default for SourceTrainPlan {
    fn default() -> Self {
        Self {
            epochs: 2,
            batches_per_epoch: 100,
            batch_size: 16,
            lr: 5e-4,
            prefix_lr: None,
            delta: 1.0,
            order: VisitOrder::Shuffled,
            dev_limit: 200,
        }
    }
}

impl SourceTrainPlan {
    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("source epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.batches_per_epoch < n_tasks {
            return Err(Error::Config(format!(
                "batches_per_epoch {} is smaller than the {n_tasks} tasks",
                self.batches_per_epoch
            )));
        }
        if !(self.lr > 0.0) || self.prefix_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Dev examples scored after each epoch.
    pub dev_limit: usize,
    /// Test examples scored for the best-dev model; 0 skips the test pass.
    pub test_limit: usize,
}

impl Default for TargetPlan {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 16, lr: 1e-4, dev_limit: 200, test_limit: 200 }
    }
}

impl TargetPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("target epochs and batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn make_batch(examples: &[&Example]) -> Result<Batch> {
    let sources: Vec<&[u32]> = examples.iter().map(|e| e.source_tokens.as_slice()).collect();
    let targets: Vec<&[u32]> = examples.iter().map(|e| e.target_tokens.as_slice()).collect();
    Batch::new(&sources, &targets, PAD)
}

/// `batch_size` distinct examples drawn uniformly (all of them when the
/// split is smaller).
pub(crate) fn draw_batch(rng: &mut Rng, examples: &[Example], batch_size: usize) -> Result<Batch> {
    let k = batch_size.min(examples.len());
    let picked: Vec<&Example> = sample(rng, examples.len(), k).into_iter().map(|i| &examples[i]).collect();
    make_batch(&picked)
}

/// One Adam step on the backbone and, when present, the prefix.
pub(crate) fn train_step(
    backbone: &mut Backbone<f32>,
    backbone_opt: &mut AdamState<f32>,
    mut prefix: Option<(&mut PrefixBank<f32>, &mut AdamState<f32>)>,
    batch: &Batch,
    dropout: &mut Rng,
) -> Result<f64> {
    let bank = prefix.as_mut().map(|(b, _)| &mut **b);
    let loss = loss_and_grads(backbone, bank, batch, &mut Mode::Train(dropout))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    backbone_opt.step(backbone.params_mut())?;
    if let Some((bank, opt)) = prefix {
        opt.step(bank.params_mut())?;
    }
    Ok(loss)
}

/// Example-weighted mean teacher-forced loss over the first `limit`
/// examples.
pub fn dev_loss(
    backbone: &Backbone<f32>,
    prefix: Option<&PrefixBank<f32>>,
    examples: &[Example],
    batch_size: usize,
    limit: usize,
) -> Result<f64> {
    let examples = &examples[..limit.min(examples.len())];
    if examples.is_empty() {
        return Err(Error::Input("no dev examples to score".into()));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        total += batch_loss(backbone, prefix, &make_batch(&refs)?, &mut Mode::Eval)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

pub(crate) fn check_shared_vocab(corpora: &[&Corpus]) -> Result<()> {
    if let Some(first) = corpora.first() {
        if let Some(other) = corpora.iter().find(|c| c.vocab_checksum != first.vocab_checksum) {
            return Err(Error::Config(format!(
                "tasks {} and {} were encoded with different vocabularies",
                first.spec.task_id, other.spec.task_id
            )));
        }
    }
    Ok(())
}
