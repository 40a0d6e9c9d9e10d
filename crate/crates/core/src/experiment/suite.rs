use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{BackboneSnapshot, PrefixBank};
use crate::training::{
    ablate_random_prefix, low_resource_run, sample_std, specify_target, train_source, TargetOutcome, TargetPlan,
    TrainReport, VisitOrder,
};

use super::config::ExperimentConfig;
use super::workspace::{write_text, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteName {
    CrossTask,
    CrossLanguage,
    Ablation,
    Order,
    LowResource,
}

impl SuiteName {
    pub const ALL: [SuiteName; 5] =
        [SuiteName::CrossTask, SuiteName::CrossLanguage, SuiteName::Ablation, SuiteName::Order, SuiteName::LowResource];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteName::CrossTask => "cross-task",
            SuiteName::CrossLanguage => "cross-language",
            SuiteName::Ablation => "ablation",
            SuiteName::Order => "order",
            SuiteName::LowResource => "low-resource",
        }
    }

    pub fn preset(&self) -> Preset {
        let cls_target = Preset {
            sources: vec!["alpha-summarization".into(), "alpha-classification".into()],
            target: "beta-classification".into(),
        };
        let sum_target = Preset {
            sources: vec!["alpha-summarization".into(), "alpha-classification".into()],
            target: "beta-summarization".into(),
        };
        match self {
            SuiteName::CrossTask | SuiteName::Ablation | SuiteName::Order => cls_target,
            SuiteName::CrossLanguage | SuiteName::LowResource => sum_target,
        }
    }

    pub fn arms(&self) -> &'static [Arm] {
        match self {
            SuiteName::CrossTask | SuiteName::CrossLanguage => &[Arm::Transfer, Arm::FineTune],
            SuiteName::Ablation | SuiteName::LowResource => &[Arm::Transfer, Arm::Random],
            SuiteName::Order => &[Arm::Transfer],
        }
    }
}

/// Source tasks and target task of a suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preset {
    pub sources: Vec<String>,
    pub target: String,
}

impl Preset {
    /// `<Source>2<Target>` name, e.g. `Sum+CLS2CLS`.
    pub fn tag(&self, ws: &Workspace) -> Result<String> {
        let src = ws
            .corpora_for(&self.sources)?
            .iter()
            .map(|c| c.spec.kind.abbrev())
            .collect::<Vec<_>>()
            .join("+");
        Ok(format!("{src}2{}", ws.corpus(&self.target)?.spec.kind.abbrev()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Prefix learned on the source tasks.
    Transfer,
    /// Freshly initialized prefix.
    Random,
    /// No prefix.
    FineTune,
}

impl Arm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Transfer => "transfer",
            Arm::Random => "random",
            Arm::FineTune => "fine-tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub seed: u64,
    pub arm: Arm,
    /// Source visit order; empty for arms without a learned prefix.
    pub order: Vec<String>,
    pub metric: String,
    pub best_dev: f64,
    pub test: Option<f64>,
    pub dev_loss: Vec<f64>,
    pub steps_per_epoch: usize,
}

impl SuiteRow {
    /// Test metric when a test pass ran, else best dev metric.
    pub fn score(&self) -> f64 {
        self.test.unwrap_or(self.best_dev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub seed: u64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub orders: Vec<Vec<String>>,
    pub order_means: Vec<f64>,
    pub spread: f64,
    pub seed_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub suite: SuiteName,
    pub tag: String,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub sources: Vec<String>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    pub rows: Vec<SuiteRow>,
    /// First arm minus second arm per seed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paired: Vec<PairedDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<OrderSummary>,
}

impl SuiteSummary {
    pub fn rows_for(&self, arm: Arm) -> Vec<&SuiteRow> {
        self.rows.iter().filter(|r| r.arm == arm).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,tag,seed,arm,order,metric,best_dev,test\n");
        for r in &self.rows {
            let test = r.test.map(|t| format!("{t:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{}",
                self.suite.as_str(),
                self.tag,
                r.seed,
                r.arm.as_str(),
                r.order.join(">"),
                r.metric,
                r.best_dev,
                test
            );
        }
        s
    }

    pub fn format(&self) -> String {
        let mut s = format!("suite {} ({}) target {}", self.suite.as_str(), self.tag, self.target);
        if let Some(rate) = self.rate {
            let _ = write!(s, " rate {rate}");
        }
        s.push('\n');
        let _ = writeln!(s, "{:<5} {:<10} {:<40} {:>9} {:>9}", "seed", "arm", "order", "best dev", "test");
        for r in &self.rows {
            let test = r.test.map(|t| format!("{t:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<5} {:<10} {:<40} {:>9.4} {:>9}",
                r.seed,
                r.arm.as_str(),
                r.order.join(">"),
                r.best_dev,
                test
            );
        }
        if !self.paired.is_empty() {
            let arms = self.suite.arms();
            let _ = writeln!(s, "paired {} - {}:", arms[0].as_str(), arms[1].as_str());
            for d in &self.paired {
                let _ = writeln!(s, "  seed {:<5} {:+.4}", d.seed, d.delta);
            }
            let wins = self.paired.iter().filter(|d| d.delta >= 0.0).count();
            let mean = self.paired.iter().map(|d| d.delta).sum::<f64>() / self.paired.len() as f64;
            let _ = writeln!(s, "  mean {mean:+.4}, first arm >= second in {wins}/{}", self.paired.len());
        }
        if let Some(o) = &self.order {
            for (order, mean) in o.orders.iter().zip(&o.order_means) {
                let _ = writeln!(s, "order {:<40} mean {mean:.4}", order.join(">"));
            }
            let _ = writeln!(s, "spread {:.4}, across-seed std {:.4}", o.spread, o.seed_std);
        }
        s
    }
}

/// Runs suites against one workspace and base snapshot, caching source
/// prefixes by (tasks, order, seed) so suites sharing a preset train each
/// prefix once.
pub struct Lab<'a> {
    pub cfg: &'a ExperimentConfig,
    pub ws: &'a Workspace,
    pub base: &'a BackboneSnapshot,
    /// Where per-run reports and summaries go; `None` keeps everything in
    /// memory.
    pub out: Option<PathBuf>,
    fingerprint: String,
    cache: HashMap<(Vec<String>, Vec<String>, u64), (PrefixBank<f32>, TrainReport)>,
}

impl<'a> Lab<'a> {
    pub fn new(cfg: &'a ExperimentConfig, ws: &'a Workspace, base: &'a BackboneSnapshot, out: Option<PathBuf>) -> Self {
        Self { cfg, ws, base, out, fingerprint: cfg.fingerprint(), cache: HashMap::new() }
    }

    fn stamp(&self, report: &mut TrainReport) {
        report.seeds.insert("data".into(), self.cfg.data.seed);
        report.seeds.insert("base".into(), self.base.seed());
    }

    /// Visit order used for a preset: the configured fixed order when it
    /// names exactly these tasks, else the preset's own listing.
    fn default_order(&self, sources: &[String]) -> Vec<String> {
        let cfg_order = &self.cfg.source.order;
        let mut a = cfg_order.clone();
        let mut b = sources.to_vec();
        a.sort();
        b.sort();
        if !cfg_order.is_empty() && a == b {
            cfg_order.clone()
        } else {
            sources.to_vec()
        }
    }

    /// Trains (or fetches) the source prefix. An empty `order` shuffles
    /// every epoch.
    pub fn source_prefix(&mut self, sources: &[String], order: &[String], seed: u64) -> Result<(PrefixBank<f32>, TrainReport)> {
        let key = (sources.to_vec(), order.to_vec(), seed);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let tasks: Vec<&Corpus> = self.ws.corpora_for(sources)?;
        let mut plan = self.cfg.source_plan(None);
        plan.order = if order.is_empty() { VisitOrder::Shuffled } else { VisitOrder::Fixed(order.to_vec()) };
        let theta0 = PrefixBank::init(&self.ws.model_config, seed, self.cfg.model.encoder_shape())?;
        let (theta, mut report) = train_source(&tasks, &plan, theta0, self.base, seed, &self.fingerprint)?;
        self.stamp(&mut report);
        self.cache.insert(key, (theta.clone(), report.clone()));
        Ok((theta, report))
    }

    fn target_plan(&self, suite: SuiteName) -> TargetPlan {
        match (&self.cfg.suite.low_resource_target, suite) {
            (Some(t), SuiteName::LowResource) => t.plan(),
            _ => self.cfg.target_plan(),
        }
    }

    fn run_arm(
        &mut self,
        suite: SuiteName,
        arm: Arm,
        preset: &Preset,
        order: &[String],
        seed: u64,
    ) -> Result<(TargetOutcome, Option<TrainReport>)> {
        let target = self.ws.corpus(&preset.target)?.clone();
        let plan = self.target_plan(suite);
        let rate = (suite == SuiteName::LowResource).then_some(self.cfg.suite.rate);
        let fp = self.fingerprint.clone();
        let (prefix, source_report) = match arm {
            Arm::Transfer => {
                let (p, r) = self.source_prefix(&preset.sources, order, seed)?;
                (Some(p), Some(r))
            }
            Arm::Random => (None, None),
            Arm::FineTune => (None, None),
        };
        let mut out = match (arm, rate) {
            (Arm::Random, None) => ablate_random_prefix(
                &target,
                self.base,
                &self.ws.model_config,
                self.cfg.model.encoder_shape(),
                &plan,
                seed,
                &fp,
            )?,
            (Arm::Random, Some(r)) => {
                let bank = PrefixBank::init(&self.ws.model_config, seed, self.cfg.model.encoder_shape())?;
                let mut o = low_resource_run(&target, r, Some(bank), self.base, &plan, seed, &fp)?;
                o.report.tags.push(crate::training::ABLATION_TAG.into());
                o
            }
            (_, None) => specify_target(&target, prefix, self.base, &plan, seed, &fp)?,
            (_, Some(r)) => low_resource_run(&target, r, prefix, self.base, &plan, seed, &fp)?,
        };
        self.stamp(&mut out.report);
        out.report.tags.push(format!("suite:{}", suite.as_str()));
        out.report.tags.push(format!("arm:{}", arm.as_str()));
        out.report.tags.push(preset.tag(self.ws)?);
        Ok((out, source_report))
    }

    fn save_report(&self, suite: SuiteName, name: &str, report: &TrainReport) -> Result<()> {
        if let Some(dir) = &self.out {
            write_text(&dir.join(suite.as_str()).join("runs").join(format!("{name}.json")), &report.to_json())?;
        }
        Ok(())
    }

    pub fn run(&mut self, suite: SuiteName, seeds: &[u64]) -> Result<SuiteSummary> {
        if seeds.is_empty() {
            return Err(Error::Config("a suite needs at least one seed".into()));
        }
        let preset = suite.preset();
        let tag = preset.tag(self.ws)?;
        let base_order = self.default_order(&preset.sources);
        let orders: Vec<Vec<String>> = if suite == SuiteName::Order {
            let mut rev = base_order.clone();
            rev.reverse();
            vec![base_order.clone(), rev]
        } else if self.cfg.source.order.is_empty() {
            vec![Vec::new()]
        } else {
            vec![base_order.clone()]
        };
        let steps_per_epoch = |n: usize, plan: &TargetPlan| n.div_ceil(plan.batch_size);

        let mut rows = Vec::new();
        for order in &orders {
            for &seed in seeds {
                for &arm in suite.arms() {
                    let (out, source_report) = self.run_arm(suite, arm, &preset, order, seed)?;
                    let order_label = if arm == Arm::Transfer { order.clone() } else { Vec::new() };
                    let ord = if order.is_empty() { "shuffled".to_string() } else { order.join("+") };
                    if let Some(r) = &source_report {
                        self.save_report(suite, &format!("source-{ord}-seed{seed}"), r)?;
                    }
                    let name = if arm == Arm::Transfer && suite == SuiteName::Order {
                        format!("{}-{ord}-seed{seed}", arm.as_str())
                    } else {
                        format!("{}-seed{seed}", arm.as_str())
                    };
                    self.save_report(suite, &name, &out.report)?;
                    let n_train = out.report.train_examples.unwrap_or(0);
                    rows.push(SuiteRow {
                        seed,
                        arm,
                        order: order_label,
                        metric: out.metric.as_str().into(),
                        best_dev: out.best_dev,
                        test: out.report.evals.first().map(|e| e.value),
                        dev_loss: out.report.epoch_trace("dev_loss"),
                        steps_per_epoch: steps_per_epoch(n_train, &self.target_plan(suite)),
                    });
                }
            }
        }

        let arms = suite.arms();
        let paired = if arms.len() == 2 {
            seeds
                .iter()
                .map(|&seed| {
                    let get = |arm: Arm| rows.iter().find(|r| r.seed == seed && r.arm == arm).map(SuiteRow::score);
                    PairedDelta { seed, delta: get(arms[0]).unwrap_or(f64::NAN) - get(arms[1]).unwrap_or(f64::NAN) }
                })
                .collect()
        } else {
            Vec::new()
        };
        let order = (suite == SuiteName::Order).then(|| {
            let per_order: Vec<Vec<f64>> = orders
                .iter()
                .map(|o| rows.iter().filter(|r| &r.order == o).map(SuiteRow::score).collect())
                .collect();
            let means: Vec<f64> = per_order.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let max = means.iter().cloned().fold(f64::MIN, f64::max);
            let min = means.iter().cloned().fold(f64::MAX, f64::min);
            OrderSummary { orders: orders.clone(), order_means: means, spread: max - min, seed_std: sample_std(&per_order[0]) }
        });

        let summary = SuiteSummary {
            suite,
            tag,
            config_fingerprint: self.fingerprint.clone(),
            seeds: seeds.to_vec(),
            sources: preset.sources.clone(),
            target: preset.target.clone(),
            rate: (suite == SuiteName::LowResource).then_some(self.cfg.suite.rate),
            rows,
            paired,
            order,
        };
        if let Some(dir) = &self.out {
            let d = dir.join(suite.as_str());
            write_text(&d.join("summary.json"), &summary.to_json())?;
            write_text(&d.join("summary.txt"), &summary.format())?;
            write_text(&d.join("summary.csv"), &summary.to_csv())?;
        }
        Ok(summary)
    }
}
