mod common;

use common::fixtures::{small_corpora, tiny_config, Corpora};
use transcoder::data::Corpus;
use transcoder::metrics::evaluate;
use transcoder::model::{Backbone, BackboneSnapshot, Checkpoint, ModelConfig, PrefixBank, PrefixEncoderShape};
use transcoder::training::{
    ablate_random_prefix, low_resource_run, order_experiment, plan_epoch, pretrain_base, sampling_distribution,
    specify_target, train_source, PretrainPlan, SamplerState, SourceTrainPlan, TargetPlan, VisitOrder, ABLATION_TAG,
};
use transcoder::Error;

// Natural logs of the two sizes, evaluated outside this code base.
const LN_167288: f64 = 12.027472156966637;
const LN_24927: f64 = 10.123706832333092;

#[test]
fn task_probabilities_match_hand_evaluation() {
    let p = sampling_distribution(&[167288, 24927], 1.0).unwrap();
    let (a, b) = (LN_167288 + 1.0, LN_24927 + 1.0);
    assert!((p[0] - a / (a + b)).abs() < 1e-12);
    assert!((p[1] - b / (a + b)).abs() < 1e-12);
    assert!((p[0] - 0.539).abs() < 5e-4 && (p[1] - 0.461).abs() < 5e-4);
}

#[test]
fn task_probability_edge_cases() {
    assert_eq!(sampling_distribution(&[40, 40], 0.5).unwrap(), vec![0.5, 0.5]);
    assert_eq!(sampling_distribution(&[9], 1.0).unwrap(), vec![1.0]);
    assert!(matches!(sampling_distribution(&[3, 0], 1.0), Err(Error::Config(_))));
    assert!(matches!(sampling_distribution(&[3, 4], 0.0), Err(Error::Config(_))));
    assert!(matches!(sampling_distribution(&[3, 4], -1.0), Err(Error::Config(_))));
}

#[test]
fn epoch_plans() {
    assert_eq!(plan_epoch(&[0.5, 0.5], 10).unwrap(), vec![5, 5]);
    assert_eq!(plan_epoch(&[1.0], 7).unwrap(), vec![7]);
    let p = sampling_distribution(&[167288, 24927], 1.0).unwrap();
    assert_eq!(plan_epoch(&p, 100).unwrap(), vec![54, 46]);
    assert!(matches!(plan_epoch(&[0.3, 0.3, 0.4], 2), Err(Error::Config(_))));
}

#[test]
fn sampler_frequencies_track_probabilities() {
    let tasks = vec![("big".to_string(), 167288), ("small".to_string(), 24927), ("tiny".to_string(), 300)];
    let mut s = SamplerState::new(&tasks, 1.0, 3).unwrap();
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[s.draw()] += 1;
    }
    for (c, p) in counts.iter().zip(s.probs()) {
        assert!((*c as f64 / n as f64 - p).abs() < 0.01);
    }
}

struct Setup {
    data: Corpora,
    config: ModelConfig,
    base: BackboneSnapshot,
}

fn setup() -> Setup {
    let data = small_corpora(60, 12, 12, 0);
    let config = tiny_config(data.vocab.len(), 2);
    let base = Backbone::<f32>::init(&config, 77).unwrap().snapshot();
    Setup { data, config, base }
}

fn quick_plan(epochs: usize, batches: usize) -> SourceTrainPlan {
    SourceTrainPlan { epochs, batches_per_epoch: batches, batch_size: 4, lr: 1e-3, dev_limit: 4, ..Default::default() }
}

fn quick_target() -> TargetPlan {
    TargetPlan { epochs: 2, batch_size: 8, lr: 1e-3, dev_limit: 6, test_limit: 6 }
}

#[test]
fn one_task_epoch_records_every_batch() {
    let s = setup();
    let task = s.data.get("alpha-summarization");
    let theta0 = PrefixBank::init(&s.config, 1, None).unwrap();
    let (theta, report) = train_source(&[task], &quick_plan(1, 9), theta0.clone(), &s.base, 1, "fp").unwrap();
    assert_eq!(report.steps.len(), 9);
    assert!(report.steps.iter().all(|r| r.loss.is_finite()));
    assert!(report.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    assert_ne!(theta.content_hash(), theta0.content_hash());
}

#[test]
fn every_task_switch_starts_from_the_base_backbone() {
    let s = setup();
    let ids = ["alpha-summarization", "alpha-translation", "alpha-classification"];
    let tasks: Vec<&Corpus> = ids.iter().map(|id| s.data.get(id)).collect();
    let enc = Some(PrefixEncoderShape::for_config(&s.config));
    let theta0 = PrefixBank::init(&s.config, 2, enc).unwrap();
    let (theta, report) = train_source(&tasks, &quick_plan(2, 6), theta0, &s.base, 2, "fp").unwrap();
    let base_hash = report.base_hash.clone().unwrap();
    assert_eq!(report.task_switches.len(), 6);
    assert!(report.task_switches.iter().all(|t| t.backbone_hash == base_hash));
    assert!(!theta.has_encoder());
    assert_eq!(theta.provenance(), "source:alpha-summarization+alpha-translation+alpha-classification");
}

#[test]
fn source_training_is_deterministic() {
    let s = setup();
    let tasks = [s.data.get("alpha-summarization"), s.data.get("alpha-classification")];
    let run = || {
        let theta0 = PrefixBank::init(&s.config, 3, None).unwrap();
        let (theta, report) = train_source(&tasks, &quick_plan(2, 4), theta0, &s.base, 3, "fp").unwrap();
        (theta.to_checkpoint().to_bytes(), report.to_json())
    };
    assert_eq!(run(), run());
}

#[test]
fn fixed_orders_are_validated_and_recorded() {
    let s = setup();
    let tasks = [s.data.get("alpha-summarization"), s.data.get("alpha-classification")];
    let theta0 = PrefixBank::init(&s.config, 4, None).unwrap();
    let order = vec!["alpha-classification".to_string(), "alpha-summarization".to_string()];
    let plan = SourceTrainPlan { order: VisitOrder::Fixed(order.clone()), ..quick_plan(1, 4) };
    let (_, report) = train_source(&tasks, &plan, theta0.clone(), &s.base, 4, "fp").unwrap();
    assert_eq!(report.task_order.as_ref(), Some(&order));
    assert_eq!(report.task_switches[0].task_id, "alpha-classification");

    let bad = SourceTrainPlan { order: VisitOrder::Fixed(vec!["alpha-summarization".into(); 2]), ..quick_plan(1, 4) };
    assert!(matches!(train_source(&tasks, &bad, theta0, &s.base, 4, "fp"), Err(Error::Config(_))));
}

#[test]
fn vocab_mismatch_is_rejected() {
    let s = setup();
    let other = small_corpora(20, 4, 4, 9);
    let mut foreign = other.get("beta-summarization").clone();
    foreign.vocab_checksum = "something else".into();
    let theta0 = PrefixBank::init(&s.config, 5, None).unwrap();
    let tasks = [s.data.get("alpha-summarization"), &foreign];
    assert!(matches!(train_source(&tasks, &quick_plan(1, 4), theta0, &s.base, 5, "fp"), Err(Error::Config(_))));
}

#[test]
fn zero_length_prefix_is_plain_fine_tuning() {
    let s = setup();
    let c0 = ModelConfig { prefix_length: 0, ..s.config.clone() };
    let target = s.data.get("beta-classification");
    let empty = PrefixBank::init(&c0, 6, None).unwrap();
    let with = specify_target(target, Some(empty), &s.base, &quick_target(), 6, "fp").unwrap();
    let without = specify_target(target, None, &s.base, &quick_target(), 6, "fp").unwrap();
    let a: Vec<u64> = with.report.steps.iter().map(|r| r.loss.to_bits()).collect();
    let b: Vec<u64> = without.report.steps.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn best_checkpoint_reproduces_its_dev_metric() {
    let s = setup();
    let target = s.data.get("beta-summarization");
    let theta = PrefixBank::init(&s.config, 7, None).unwrap();
    let plan = quick_target();
    let out = specify_target(target, Some(theta), &s.base, &plan, 7, "fp").unwrap();
    let backbone: Backbone<f32> =
        BackboneSnapshot::from_bytes(&out.backbone.snapshot().to_bytes()).unwrap().restore(&s.config).unwrap();
    let ck = Checkpoint::from_bytes(&out.prefix.as_ref().unwrap().to_checkpoint().to_bytes()).unwrap();
    let prefix = PrefixBank::<f32>::from_checkpoint(&ck, &s.config).unwrap();
    let dev = &target.dev[..plan.dev_limit];
    let again = evaluate(&backbone, Some(&prefix), &target.spec, dev, 64).unwrap();
    assert_eq!(again.value, out.best_dev);
}

#[test]
fn ablation_arm_is_tagged_and_deterministic() {
    let s = setup();
    let target = s.data.get("beta-classification");
    let run = || ablate_random_prefix(target, &s.base, &s.config, None, &quick_target(), 8, "fp").unwrap().report;
    let a = run();
    assert!(a.has_tag(ABLATION_TAG));
    assert_eq!(a.to_json(), run().to_json());
    let transfer = specify_target(target, Some(PrefixBank::init(&s.config, 1, None).unwrap()), &s.base, &quick_target(), 8, "fp")
        .unwrap()
        .report;
    assert_eq!(transfer.config_fingerprint, a.config_fingerprint);
}

#[test]
fn low_resource_subsets() {
    let s = setup();
    let target = s.data.get("beta-classification");
    let full = specify_target(target, None, &s.base, &quick_target(), 9, "fp").unwrap().report;
    let mut same = low_resource_run(target, 1.0, None, &s.base, &quick_target(), 9, "fp").unwrap().report;
    assert_eq!(same.rate, Some(1.0));
    assert_eq!(same.steps, full.steps);
    same.rate = None;
    same.tags.retain(|t| t != "low-resource");
    assert_eq!(same.to_json(), full.to_json());

    let big = small_corpora(1000, 10, 10, 1);
    let c = big.get("alpha-classification");
    let cfg = tiny_config(big.vocab.len(), 2);
    let base = Backbone::<f32>::init(&cfg, 1).unwrap().snapshot();
    let plan = TargetPlan { epochs: 1, batch_size: 50, lr: 1e-3, dev_limit: 4, test_limit: 0 };
    let r = low_resource_run(c, 0.10, None, &base, &plan, 9, "fp").unwrap().report;
    assert_eq!(r.rate, Some(0.10));
    assert_eq!(r.train_examples, Some(100));
    assert_eq!(r.steps.len(), 2);
}

#[test]
fn order_table_has_one_row_per_order_and_seed() {
    let s = setup();
    let tasks = [s.data.get("alpha-summarization"), s.data.get("alpha-classification")];
    let orders = vec![
        vec!["alpha-summarization".to_string(), "alpha-classification".to_string()],
        vec!["alpha-classification".to_string(), "alpha-summarization".to_string()],
    ];
    let target = s.data.get("beta-classification");
    let table = order_experiment(&tasks, &orders, target, &quick_plan(1, 4), &quick_target(), &s.base, &s.config, None, &[0], "fp")
        .unwrap();
    assert_eq!(table.rows.len(), 2);
    let max = table.order_means.iter().cloned().fold(f64::MIN, f64::max);
    let min = table.order_means.iter().cloned().fold(f64::MAX, f64::min);
    assert_eq!(table.spread, max - min);
    let one = order_experiment(&tasks, &orders[..1], target, &quick_plan(1, 4), &quick_target(), &s.base, &s.config, None, &[0], "fp");
    assert!(matches!(one, Err(Error::Config(_))));
}

#[test]
fn denoising_loss_trends_down() {
    let s = setup();
    let corpora: Vec<&Corpus> = s.data.encoded.iter().collect();
    let plan = PretrainPlan { steps: 150, batch_size: 8, lr: 3e-3, mask_rate: 0.15 };
    let (backbone, report) = pretrain_base(&corpora, &s.config, &plan, 10, "fp").unwrap();
    let mean = |xs: &[transcoder::training::StepRecord]| xs.iter().map(|r| r.loss).sum::<f64>() / xs.len() as f64;
    let first = mean(&report.steps[..50]);
    let last = mean(&report.steps[100..]);
    assert!(last < first, "window means {first} -> {last}");
    assert_eq!(backbone.snapshot().provenance().as_str(), "base-pretrained");
    let (again, _) = pretrain_base(&corpora, &s.config, &plan, 10, "fp").unwrap();
    assert_eq!(again.snapshot().to_bytes(), backbone.snapshot().to_bytes());
}
