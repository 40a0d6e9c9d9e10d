use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{BackboneSnapshot, ModelConfig, PrefixBank, PrefixEncoderShape};
use crate::rng::stream;

use super::target::specify_target;
use super::{check_shared_vocab, dev_loss, draw_batch, train_step, SamplerState, SourceTrainPlan, TargetPlan, TrainReport, VisitOrder};

fn resolve_order(order: &[String], tasks: &[&Corpus]) -> Result<Vec<usize>> {
    let ids: Vec<&str> = tasks.iter().map(|c| c.spec.task_id.as_str()).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(order.len());
    for name in order {
        let i = ids
            .iter()
            .position(|id| id == name)
            .ok_or_else(|| Error::Config(format!("task order names unknown task {name:?}")))?;
        if !seen.insert(i) {
            return Err(Error::Config(format!("task order lists {name:?} twice")));
        }
        out.push(i);
    }
    if out.len() != ids.len() {
        return Err(Error::Config(format!("task order has {} entries for {} tasks", out.len(), ids.len())));
    }
    Ok(out)
}

/// Continual source-task training.
///
/// Each epoch visits every task once. On arrival at a task the backbone is
/// reloaded from `base` with a fresh optimizer, then the task receives its
/// share of the epoch's batch budget, every step updating both backbone
/// and prefix. Only the prefix carries over between tasks; it keeps a single
/// optimizer for the whole run and is collapsed to flat arrays at the end.
pub fn train_source(
    tasks: &[&Corpus],
    plan: &SourceTrainPlan,
    mut prefix: PrefixBank<f32>,
    base: &BackboneSnapshot,
    seed: u64,
    fingerprint: &str,
) -> Result<(PrefixBank<f32>, TrainReport)> {
    if tasks.is_empty() {
        return Err(Error::Config("source training needs at least one task".into()));
    }
    plan.validate(tasks.len())?;
    check_shared_vocab(tasks)?;
    for c in tasks {
        c.validate()?;
    }
    let config = prefix.config().clone();
    let base_hash = base.restore::<f32>(&config)?.content_hash();
    let sizes: Vec<(String, usize)> = tasks.iter().map(|c| (c.spec.task_id.clone(), c.train.len())).collect();
    let sampler = SamplerState::new(&sizes, plan.delta, seed)?;
    let fixed = match &plan.order {
        VisitOrder::Shuffled => None,
        VisitOrder::Fixed(names) => Some(resolve_order(names, tasks)?),
    };

    let mut report = TrainReport::new(fingerprint);
    report.seeds.insert("run".into(), seed);
    report.tags.push("source".into());
    report.base_hash = Some(base_hash);
    if let VisitOrder::Fixed(names) = &plan.order {
        report.task_order = Some(names.clone());
    }

    let adam = AdamConfig::with_lr(plan.lr);
    let mut prefix_opt = AdamState::new(AdamConfig::with_lr(plan.prefix_lr.unwrap_or(plan.lr)), prefix.params())?;
    let mut batch_rng = stream(seed, "source-batches");
    let mut dropout_rng = stream(seed, "source-dropout");
    let mut order_rng = stream(seed, "task-order");

    for epoch in 1..=plan.epochs {
        let alloc = sampler.plan_epoch(plan.batches_per_epoch)?;
        let visit = match &fixed {
            Some(v) => v.clone(),
            None => {
                let mut v: Vec<usize> = (0..tasks.len()).collect();
                v.shuffle(&mut order_rng);
                v
            }
        };
        for t in visit {
            let corpus = tasks[t];
            let task_id = corpus.spec.task_id.as_str();
            let mut backbone = base.restore::<f32>(&config)?;
            report.task_switches.push(super::TaskSwitch {
                epoch,
                task_id: task_id.to_string(),
                step: report.steps.len(),
                backbone_hash: backbone.content_hash(),
            });
            let mut backbone_opt = AdamState::new(adam, backbone.params())?;
            for _ in 0..alloc[t].1 {
                let batch = draw_batch(&mut batch_rng, &corpus.train, plan.batch_size).map_err(|e| report.abort(e))?;
                let loss = train_step(&mut backbone, &mut backbone_opt, Some((&mut prefix, &mut prefix_opt)), &batch, &mut dropout_rng)
                    .map_err(|e| report.abort(e))?;
                report.push_step(epoch, task_id, loss).map_err(|e| report.abort(e))?;
            }
            if !corpus.dev.is_empty() && plan.dev_limit > 0 {
                let dl = dev_loss(&backbone, Some(&prefix), &corpus.dev, 64, plan.dev_limit)?;
                log::info!("epoch {epoch} task {task_id}: {} batches, dev loss {dl:.4}", alloc[t].1);
                report.push_epoch(epoch, task_id, "dev_loss", dl);
            }
        }
    }
    if prefix.has_encoder() {
        prefix.collapse()?;
    }
    prefix.set_provenance(format!("source:{}", tasks.iter().map(|c| c.spec.task_id.as_str()).collect::<Vec<_>>().join("+")));
    Ok((prefix, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: Vec<String>,
    pub seed: u64,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderTable {
    pub rows: Vec<OrderRow>,
    /// Mean target metric per order, in the order given.
    pub order_means: Vec<f64>,
    /// `max − min` of the per-order means.
    pub spread: f64,
    /// Sample standard deviation across seeds for the first order.
    pub seed_std: f64,
}

impl OrderTable {
    pub fn format(&self) -> String {
        let mut s = String::from("order                                          seed     metric      value\n");
        for r in &self.rows {
            s.push_str(&format!("{:<46} {:>5}  {:<9} {:>9.4}\n", r.order.join(">"), r.seed, r.metric_name, r.value));
        }
        s.push_str(&format!("spread of order means {:.4}, across-seed std {:.4}\n", self.spread, self.seed_std));
        s
    }
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two
/// values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Trains the prefix once per (order, seed) with a fixed visit order, then
/// specifies the held-out target and tabulates its best dev metric.
#[allow(clippy::too_many_arguments)]
pub fn order_experiment(
    tasks: &[&Corpus],
    orders: &[Vec<String>],
    target: &Corpus,
    plan: &SourceTrainPlan,
    target_plan: &TargetPlan,
    base: &BackboneSnapshot,
    config: &ModelConfig,
    encoder: Option<PrefixEncoderShape>,
    seeds: &[u64],
    fingerprint: &str,
) -> Result<OrderTable> {
    if orders.len() < 2 {
        return Err(Error::Config("order experiment needs at least two orders".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("order experiment needs at least one seed".into()));
    }
    let mut distinct = HashSet::new();
    for o in orders {
        resolve_order(o, tasks)?;
        if !distinct.insert(o.clone()) {
            log::warn!("order {} listed more than once", o.join(">"));
        }
    }
    let mut rows = Vec::new();
    let mut order_means = Vec::new();
    let mut first_values = Vec::new();
    for (k, order) in orders.iter().enumerate() {
        let mut values = Vec::new();
        for &seed in seeds {
            let mut p = plan.clone();
            p.order = VisitOrder::Fixed(order.clone());
            let theta0 = PrefixBank::init(config, seed, encoder)?;
            let (theta, _) = train_source(tasks, &p, theta0, base, seed, fingerprint)?;
            let out = specify_target(target, Some(theta), base, target_plan, seed, fingerprint)?;
            rows.push(OrderRow { order: order.clone(), seed, metric_name: out.metric.as_str().into(), value: out.best_dev });
            values.push(out.best_dev);
        }
        order_means.push(values.iter().sum::<f64>() / values.len() as f64);
        if k == 0 {
            first_values = values;
        }
    }
    let max = order_means.iter().cloned().fold(f64::MIN, f64::max);
    let min = order_means.iter().cloned().fold(f64::MAX, f64::min);
    Ok(OrderTable { rows, order_means, spread: max - min, seed_std: sample_std(&first_values) })
}
