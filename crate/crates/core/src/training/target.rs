use rand::seq::SliceRandom;

use crate::autodiff::{AdamConfig, AdamState};
use crate::data::{subsample, Corpus, Example};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metric};
use crate::model::{Backbone, BackboneSnapshot, ModelConfig, PrefixBank, PrefixEncoderShape};
use crate::rng::stream;

use super::{dev_loss, make_batch, train_step, TargetPlan, TrainReport};

pub const ABLATION_TAG: &str = "ablation-random";
pub const SUPPORTED_RATES: [f64; 3] = [0.05, 0.10, 0.20];

const EVAL_BATCH: usize = 64;

/// Best-dev model of a target run together with its report.
#[derive(Debug, Clone)]
pub struct TargetOutcome {
    pub backbone: Backbone<f32>,
    pub prefix: Option<PrefixBank<f32>>,
    pub report: TrainReport,
    pub metric: Metric,
    pub best_dev: f64,
}

/// Attaches `prefix` to a backbone loaded from `fresh` and tunes both on
/// the target's train split.
///
/// After every epoch the dev loss and dev metric are recorded; the model
/// with the highest dev metric (earliest on ties) is returned and, when
/// `plan.test_limit > 0`, scored on the test split. `None` trains the
/// backbone alone.
pub fn specify_target(
    target: &Corpus,
    prefix: Option<PrefixBank<f32>>,
    fresh: &BackboneSnapshot,
    plan: &TargetPlan,
    seed: u64,
    fingerprint: &str,
) -> Result<TargetOutcome> {
    plan.validate()?;
    target.validate()?;
    if target.dev.is_empty() {
        return Err(Error::Data(format!("target {} has no dev split for model selection", target.spec.task_id)));
    }
    let mut prefix = prefix;
    if let Some(bank) = prefix.as_mut() {
        if bank.has_encoder() {
            bank.collapse()?;
        }
    }
    let config = prefix.as_ref().map_or_else(|| fresh.config().clone(), |p| p.config().clone());
    let mut backbone: Backbone<f32> = fresh.restore(&config)?;
    let task_id = target.spec.task_id.clone();
    let metric = Metric::for_kind(target.spec.kind);

    let mut report = TrainReport::new(fingerprint);
    report.seeds.insert("run".into(), seed);
    report.tags.push("target".into());
    report.train_examples = Some(target.train.len());
    report.prefix_provenance = prefix.as_ref().map(|p| p.provenance().to_string());

    let adam = AdamConfig::with_lr(plan.lr);
    let mut backbone_opt = AdamState::new(adam, backbone.params())?;
    let mut prefix_opt = match &prefix {
        Some(p) => Some(AdamState::new(adam, p.params())?),
        None => None,
    };
    let mut shuffle_rng = stream(seed, "target-shuffle");
    let mut dropout_rng = stream(seed, "target-dropout");
    let dev = &target.dev[..plan.dev_limit.min(target.dev.len()).max(1)];

    let mut best: Option<(f64, usize, Backbone<f32>, Option<PrefixBank<f32>>)> = None;
    let mut order: Vec<usize> = (0..target.train.len()).collect();
    for epoch in 1..=plan.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(plan.batch_size) {
            let picked: Vec<&Example> = chunk.iter().map(|&i| &target.train[i]).collect();
            let batch = make_batch(&picked).map_err(|e| report.abort(e))?;
            let step_prefix = prefix.as_mut().zip(prefix_opt.as_mut());
            let loss = train_step(&mut backbone, &mut backbone_opt, step_prefix, &batch, &mut dropout_rng)
                .map_err(|e| report.abort(e))?;
            report.push_step(epoch, &task_id, loss).map_err(|e| report.abort(e))?;
        }
        let dl = dev_loss(&backbone, prefix.as_ref(), dev, EVAL_BATCH, dev.len())?;
        report.push_epoch(epoch, &task_id, "dev_loss", dl);
        let score = evaluate(&backbone, prefix.as_ref(), &target.spec, dev, EVAL_BATCH)?.value;
        report.push_epoch(epoch, &task_id, metric.as_str(), score);
        log::info!("{task_id} epoch {epoch}: dev loss {dl:.4}, dev {} {score:.4}", metric.as_str());
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            best = Some((score, epoch, backbone.clone(), prefix.clone()));
        }
    }
    let (best_dev, best_epoch, backbone, prefix) = best.expect("at least one epoch");
    report.best_epoch = Some(best_epoch);
    if plan.test_limit > 0 && !target.test.is_empty() {
        let test = &target.test[..plan.test_limit.min(target.test.len())];
        report.evals.push(evaluate(&backbone, prefix.as_ref(), &target.spec, test, EVAL_BATCH)?);
    }
    Ok(TargetOutcome { backbone, prefix, report, metric, best_dev })
}

/// The target run with a freshly initialized prefix in place of a
/// transferred one. The initialization is the one source training starts
/// from, so the two arms differ only in what the prefix has learned.
#[allow(clippy::too_many_arguments)]
pub fn ablate_random_prefix(
    target: &Corpus,
    fresh: &BackboneSnapshot,
    config: &ModelConfig,
    encoder: Option<PrefixEncoderShape>,
    plan: &TargetPlan,
    seed: u64,
    fingerprint: &str,
) -> Result<TargetOutcome> {
    let bank = PrefixBank::init(config, seed, encoder)?;
    let mut out = specify_target(target, Some(bank), fresh, plan, seed, fingerprint)?;
    out.report.tags.push(ABLATION_TAG.into());
    Ok(out)
}

/// Subsamples the target's train split at `rate` and runs
/// [`specify_target`] on what remains.
pub fn low_resource_run(
    target: &Corpus,
    rate: f64,
    prefix: Option<PrefixBank<f32>>,
    fresh: &BackboneSnapshot,
    plan: &TargetPlan,
    seed: u64,
    fingerprint: &str,
) -> Result<TargetOutcome> {
    if !SUPPORTED_RATES.iter().any(|r| (r - rate).abs() < 1e-12) && rate != 1.0 {
        log::warn!("low-resource rate {rate} is outside the usual 0.05, 0.10, 0.20");
    }
    let reduced = subsample(target, rate, seed)?;
    let mut out = specify_target(&reduced, prefix, fresh, plan, seed, fingerprint)?;
    out.report.rate = Some(rate);
    out.report.tags.push("low-resource".into());
    Ok(out)
}
