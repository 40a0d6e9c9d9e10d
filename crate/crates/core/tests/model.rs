mod common;

use common::fixtures::{tiny_batch, tiny_config};
use transcoder::autodiff::{AdamConfig, AdamState};
use transcoder::model::{
    generate_greedy, logits, loss_and_grads, Backbone, BackboneSnapshot, Batch, Checkpoint, ModelConfig, Mode,
    PrefixBank, PrefixEncoderShape,
};
use transcoder::Error;

fn toy_config() -> ModelConfig {
    ModelConfig { vocab_size: 512, ..ModelConfig::default() }
}

/// Parameter count written out layer by layer from the architecture.
fn closed_form_count(c: &ModelConfig) -> usize {
    let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
    let norm = 2 * d;
    let attn = 4 * (d * d + d);
    let ff = (d * f + f) + (f * d + d);
    let embed = v * d;
    let encoder = c.n_encoder_layers * (2 * norm + attn + ff) + norm;
    let decoder = c.n_decoder_layers * (3 * norm + 2 * attn + ff) + norm;
    let head = d * v + v;
    embed + encoder + decoder + head
}

#[test]
fn init_is_deterministic_per_seed() {
    let c = tiny_config(12, 3);
    let a = Backbone::<f32>::init(&c, 4).unwrap();
    let b = Backbone::<f32>::init(&c, 4).unwrap();
    let other = Backbone::<f32>::init(&c, 5).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_ne!(a.content_hash(), other.content_hash());
}

#[test]
fn parameter_count_matches_closed_form() {
    let c = toy_config();
    let b = Backbone::<f32>::init(&c, 0).unwrap();
    assert_eq!(b.num_parameters(), closed_form_count(&c));
    // 32768 + (2·49984 + 128) + (2·66752 + 128) + 33280
    assert_eq!(closed_form_count(&c), 299_776);
}

#[test]
fn heads_must_divide_width() {
    let c = ModelConfig { n_heads: 5, ..toy_config() };
    assert!(matches!(Backbone::<f32>::init(&c, 0), Err(Error::Config(_))));
}

#[test]
fn logits_shape() {
    let c = toy_config();
    let b = Backbone::<f32>::init(&c, 0).unwrap();
    let s: &[u32] = &[5, 6, 7, 2];
    let t: &[u32] = &[1, 9, 9, 9, 9, 9, 9, 9, 2];
    let batch = Batch::new(&[s, s], &[t, t], 0).unwrap();
    let out = logits(&b, None, &batch, &mut Mode::Eval).unwrap();
    assert_eq!(out.shape(), &[2, 8, 512]);
}

#[test]
fn zero_length_prefix_equals_no_prefix() {
    let c = tiny_config(12, 0);
    let b = Backbone::<f32>::init(&c, 1).unwrap();
    let bank = PrefixBank::<f32>::init(&c, 1, None).unwrap();
    let batch = tiny_batch();
    let plain = logits(&b, None, &batch, &mut Mode::Eval).unwrap();
    let empty = logits(&b, Some(&bank), &batch, &mut Mode::Eval).unwrap();
    assert_eq!(plain.data(), empty.data());
}

#[test]
fn every_prefix_tensor_receives_gradient() {
    let c = tiny_config(12, 3);
    let mut b = Backbone::<f64>::init(&c, 2).unwrap();
    for encoder in [None, Some(PrefixEncoderShape::for_config(&c))] {
        let mut bank = PrefixBank::<f64>::init(&c, 3, encoder).unwrap();
        loss_and_grads(&mut b, Some(&mut bank), &tiny_batch(), &mut Mode::Eval).unwrap();
        for p in bank.params().iter() {
            // Encoder biases start at zero but still carry gradient.
            let g = p.tensor.grad().unwrap();
            assert!(g.iter().any(|x| *x != 0.0), "{} has an all-zero gradient", p.name);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let c = tiny_config(12, 3);
    let b = Backbone::<f64>::init(&c, 6).unwrap();
    let bank = PrefixBank::<f64>::init(&c, 6, None).unwrap();
    let s: &[u32] = &[5, 6, 7, 2];
    let t1: &[u32] = &[1, 8, 9, 10, 11, 2];
    for j in 1..t1.len() - 1 {
        let mut t2 = t1.to_vec();
        t2[j] = 4;
        for prefix in [None, Some(&bank)] {
            let a = logits(&b, prefix, &Batch::new(&[s], &[t1], 0).unwrap(), &mut Mode::Eval).unwrap();
            let z = logits(&b, prefix, &Batch::new(&[s], &[&t2], 0).unwrap(), &mut Mode::Eval).unwrap();
            let v = c.vocab_size;
            assert_eq!(a.data()[..j * v], z.data()[..j * v], "position < {j} changed");
            assert_ne!(a.data()[j * v..], z.data()[j * v..]);
        }
    }
}

#[test]
fn collapse_preserves_outputs_and_shrinks() {
    let c = tiny_config(12, 3);
    let b = Backbone::<f32>::init(&c, 7).unwrap();
    let mut bank = PrefixBank::<f32>::init(&c, 7, Some(PrefixEncoderShape::for_config(&c))).unwrap();
    let batch = tiny_batch();
    let before = logits(&b, Some(&bank), &batch, &mut Mode::Eval).unwrap();
    let size_before = bank.to_checkpoint().to_bytes().len();
    assert!(bank.collapse().unwrap());
    let after = logits(&b, Some(&bank), &batch, &mut Mode::Eval).unwrap();
    let diff = before.data().iter().zip(after.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff < 1e-6, "max abs diff {diff}");
    assert!(bank.to_checkpoint().to_bytes().len() < size_before);

    let hash = bank.content_hash();
    assert!(!bank.collapse().unwrap());
    assert_eq!(bank.content_hash(), hash);
}

#[test]
fn snapshot_round_trip_is_byte_identical() {
    let c = tiny_config(12, 3);
    let b = Backbone::<f32>::init(&c, 8).unwrap();
    let snap = b.snapshot();
    let bytes = snap.to_bytes();
    assert_eq!(BackboneSnapshot::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    assert!(snap.checkpoint().tensors.iter().all(|t| !t.name.starts_with("prefix.")));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    snap.save(&path).unwrap();
    let loaded = BackboneSnapshot::load(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), loaded.to_bytes());

    let restored: Backbone<f32> = loaded.restore(&c).unwrap();
    let batch = tiny_batch();
    assert_eq!(
        logits(&b, None, &batch, &mut Mode::Eval).unwrap().data(),
        logits(&restored, None, &batch, &mut Mode::Eval).unwrap().data()
    );

    let wrong = ModelConfig { d_model: 12, d_ff: 24, ..c.clone() };
    assert!(matches!(loaded.restore::<f32>(&wrong), Err(Error::Compatibility(_))));
}

#[test]
fn prefix_round_trip_and_length_mismatch() {
    let c = tiny_config(12, 3);
    let bank = PrefixBank::<f32>::init(&c, 9, None).unwrap();
    let bytes = bank.to_checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let back = PrefixBank::<f32>::from_checkpoint(&ck, &c).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), bytes);

    let longer = ModelConfig { prefix_length: 5, ..c };
    let err = PrefixBank::<f32>::from_checkpoint(&ck, &longer).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Compatibility(_)));
    assert!(msg.contains("prefix length 3") && msg.contains("5 expected"), "{msg}");
}

#[test]
fn greedy_decoding_is_deterministic_and_bounded() {
    let c = tiny_config(12, 3);
    let b = Backbone::<f32>::init(&c, 10).unwrap();
    let bank = PrefixBank::<f32>::init(&c, 10, None).unwrap();
    let s: &[u32] = &[5, 6, 7, 2];
    let a = generate_greedy(&b, Some(&bank), &[s], 8, 1, 2, 0, None).unwrap();
    let z = generate_greedy(&b, Some(&bank), &[s], 8, 1, 2, 0, None).unwrap();
    assert_eq!(a, z);
    assert!(a[0].len() <= 8);
    let one = generate_greedy(&b, Some(&bank), &[s], 1, 1, 2, 0, None).unwrap();
    assert_eq!(one[0].len(), 1);
}

#[test]
fn overfitting_one_example_memorizes_it() {
    let c = ModelConfig { d_model: 32, n_heads: 2, d_ff: 64, ..tiny_config(12, 4) };
    let mut b = Backbone::<f32>::init(&c, 11).unwrap();
    let mut bank = PrefixBank::<f32>::init(&c, 11, None).unwrap();
    let s: &[u32] = &[5, 6, 7, 8, 2];
    let t: &[u32] = &[1, 9, 10, 4, 11, 2];
    let batch = Batch::new(&[s], &[t], 0).unwrap();
    let cfg = AdamConfig::with_lr(1e-2);
    let mut ob = AdamState::new(cfg, b.params()).unwrap();
    let mut op = AdamState::new(cfg, bank.params()).unwrap();
    for _ in 0..200 {
        loss_and_grads(&mut b, Some(&mut bank), &batch, &mut Mode::Eval).unwrap();
        ob.step(b.params_mut()).unwrap();
        op.step(bank.params_mut()).unwrap();
    }
    let out = generate_greedy(&b, Some(&bank), &[s], 10, 1, 2, 0, None).unwrap();
    assert_eq!(out[0], &t[1..]);
}
