use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::data::{Corpus, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::model::{Backbone, Batch, ModelConfig, Provenance};
use crate::rng::{stream, Rng};

use super::{train_step, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainPlan {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self { steps: 400, batch_size: 16, lr: 1e-3, mask_rate: 0.15 }
    }
}

/// Program texts (source sides) of every train split, without EOS.
fn unimodal_programs(corpora: &[&Corpus]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = corpora
        .iter()
        .flat_map(|c| c.train.iter())
        .map(|e| e.source_tokens.iter().copied().take_while(|&t| t != EOS).collect::<Vec<u32>>())
        .filter(|p| !p.is_empty())
        .collect();
    out.sort();
    out.dedup();
    out
}

fn denoising_batch(rng: &mut Rng, programs: &[Vec<u32>], batch_size: usize, mask_rate: f64) -> Result<Batch> {
    let k = batch_size.min(programs.len());
    let mut sources = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for i in sample(rng, programs.len(), k) {
        let p = &programs[i];
        let mut src: Vec<u32> = p.iter().map(|&t| if rng.random_bool(mask_rate) { UNK } else { t }).collect();
        src.push(EOS);
        let mut tgt = Vec::with_capacity(p.len() + 2);
        tgt.push(BOS);
        tgt.extend_from_slice(p);
        tgt.push(EOS);
        sources.push(src);
        targets.push(tgt);
    }
    let s: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let t: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
    Batch::new(&s, &t, PAD)
}

/// Denoising pass standing in for a pretrained code model: a fraction
/// `mask_rate` of program tokens is replaced by UNK and the model
/// reconstructs the original program.
pub fn pretrain_base(
    corpora: &[&Corpus],
    config: &ModelConfig,
    plan: &PretrainPlan,
    seed: u64,
    fingerprint: &str,
) -> Result<(Backbone<f32>, TrainReport)> {
    if !(0.0..1.0).contains(&plan.mask_rate) {
        return Err(Error::Config(format!("mask rate {} outside [0, 1)", plan.mask_rate)));
    }
    if plan.batch_size == 0 || !(plan.lr > 0.0) {
        return Err(Error::Config("pretraining needs batch_size >= 1 and lr > 0".into()));
    }
    let programs = unimodal_programs(corpora);
    if programs.is_empty() {
        return Err(Error::Data("no programs to pretrain on".into()));
    }
    let mut backbone = Backbone::<f32>::init(config, seed)?;
    let mut opt = AdamState::new(AdamConfig::with_lr(plan.lr), backbone.params())?;
    let mut batch_rng = stream(seed, "pretrain-batches");
    let mut dropout_rng = stream(seed, "pretrain-dropout");
    let mut report = TrainReport::new(fingerprint);
    report.seeds.insert("run".into(), seed);
    report.tags.push("pretrain".into());
    for _ in 0..plan.steps {
        let batch = denoising_batch(&mut batch_rng, &programs, plan.batch_size, plan.mask_rate)?;
        let loss = train_step(&mut backbone, &mut opt, None, &batch, &mut dropout_rng).map_err(|e| report.abort(e))?;
        report.push_step(1, "denoise", loss).map_err(|e| report.abort(e))?;
    }
    backbone.set_provenance(Provenance::BasePretrained);
    Ok((backbone, report))
}
