//! Central finite differences at 64-bit precision.

use rand::Rng as _;
use transcoder::autodiff::{DiffTensor, Graph, Var};
use transcoder::model::{batch_loss, loss_and_grads, Backbone, Batch, Mode, PrefixBank};
use transcoder::rng::{stream, Rng};
use transcoder::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> DiffTensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    DiffTensor::new(shape.to_vec(), data).unwrap()
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks.
pub fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> DiffTensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    DiffTensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Scalar objective: the op output, contracted with fixed random weights
/// when it is not already a scalar.
fn objective(g: &mut Graph<f64>, vars: &[Var], build: &Build) -> Var {
    let out = build(g, vars).unwrap();
    if g.shape(out).is_empty() {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let mut rng = stream(0, "gradcheck-weights");
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(shape, w).unwrap();
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

fn evaluate(inputs: &[DiffTensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.shape().to_vec(), t.data().to_vec(), false).unwrap())
        .collect();
    let loss = objective(&mut g, &vars, build);
    g.value(loss)[0]
}

/// Largest relative error over every coordinate of every input.
pub fn check(inputs: &[DiffTensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.shape().to_vec(), t.data().to_vec(), true).unwrap())
        .collect();
    let loss = objective(&mut g, &vars, build);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for i in 0..work[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + STEP;
            let plus = evaluate(&work, build);
            work[t].data_mut()[i] = orig - STEP;
            let minus = evaluate(&work, build);
            work[t].data_mut()[i] = orig;
            worst = worst.max(rel_err(grads[i], (plus - minus) / (2.0 * STEP)));
        }
    }
    worst
}

/// Which store a model coordinate lives in.
#[derive(Debug, Clone, Copy)]
pub enum Owner {
    Backbone,
    Prefix,
}

fn model_loss(backbone: &Backbone<f64>, prefix: Option<&PrefixBank<f64>>, batch: &Batch) -> f64 {
    batch_loss(backbone, prefix, batch, &mut Mode::Eval).unwrap()
}

fn nudge(backbone: &mut Backbone<f64>, prefix: Option<&mut PrefixBank<f64>>, at: (Owner, usize, usize), delta: f64) {
    let (owner, p, i) = at;
    let store = match owner {
        Owner::Backbone => backbone.params_mut(),
        Owner::Prefix => prefix.expect("prefix coordinate").params_mut(),
    };
    let param = store.iter_mut().nth(p).unwrap();
    param.tensor.data_mut()[i] += delta;
}

/// Compares analytic and numeric gradients of the full model loss at
/// `samples` random coordinates drawn from `rng`.
pub fn check_model(
    backbone: &mut Backbone<f64>,
    mut prefix: Option<&mut PrefixBank<f64>>,
    batch: &Batch,
    rng: &mut Rng,
    samples: usize,
) -> f64 {
    loss_and_grads(backbone, prefix.as_deref_mut(), batch, &mut Mode::Eval).unwrap();
    let mut coords: Vec<(Owner, usize, usize)> = Vec::new();
    for (p, param) in backbone.params().iter().enumerate() {
        coords.extend((0..param.tensor.numel()).map(|i| (Owner::Backbone, p, i)));
    }
    if let Some(bank) = prefix.as_deref() {
        for (p, param) in bank.params().iter().enumerate() {
            coords.extend((0..param.tensor.numel()).map(|i| (Owner::Prefix, p, i)));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let at = coords[rng.random_range(0..coords.len())];
        let analytic = {
            let store = match at.0 {
                Owner::Backbone => backbone.params(),
                Owner::Prefix => prefix.as_deref().unwrap().params(),
            };
            store.iter().nth(at.1).unwrap().tensor.grad().unwrap()[at.2]
        };
        nudge(backbone, prefix.as_deref_mut(), at, STEP);
        let plus = model_loss(backbone, prefix.as_deref(), batch);
        nudge(backbone, prefix.as_deref_mut(), at, -2.0 * STEP);
        let minus = model_loss(backbone, prefix.as_deref(), batch);
        nudge(backbone, prefix.as_deref_mut(), at, STEP);
        worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * STEP)));
    }
    worst
}

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Box<Build<'static>>)> {
    use transcoder::model::{attention_with_prefix, AttnMask};
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul-shared", vec![vec![2, 3, 4], vec![4, 5]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul-batched", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("add-bias", vec![vec![2, 3, 4], vec![4]], Box::new(|g, v| g.add_bias(v[0], v[1]))),
        ("scale", vec![vec![3, 4]], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("relu", vec![vec![3, 4]], Box::new(|g, v| g.relu(v[0]))),
        ("tanh", vec![vec![3, 4]], Box::new(|g, v| g.tanh(v[0]))),
        ("softmax-axis0", vec![vec![2, 3, 4]], Box::new(|g, v| g.softmax(v[0], 0))),
        ("softmax-axis1", vec![vec![2, 3, 4]], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax-last", vec![vec![2, 3, 4]], Box::new(|g, v| g.softmax(v[0], 2))),
        (
            "layer-norm",
            vec![vec![2, 3, 5], vec![5], vec![5]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "cross-entropy",
            vec![vec![2, 3, 5]],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 4, 0, 2, 0, 3], 0)),
        ),
        ("embedding", vec![vec![6, 3]], Box::new(|g, v| g.embedding(v[0], &[2, 5, 2, 0]))),
        ("permute", vec![vec![2, 3, 4]], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("transpose-last", vec![vec![2, 3, 4]], Box::new(|g, v| g.transpose_last(v[0]))),
        ("reshape", vec![vec![2, 3, 4]], Box::new(|g, v| g.reshape(v[0], vec![4, 6]))),
        ("concat", vec![vec![2, 1, 3], vec![2, 2, 3]], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("broadcast-lead", vec![vec![3, 2]], Box::new(|g, v| g.broadcast_lead(v[0], 3))),
        ("sum", vec![vec![3, 4]], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| g.mean(v[0]))),
        (
            "attention-with-prefix",
            vec![vec![2, 2, 3, 2], vec![2, 2, 3, 2], vec![2, 2, 3, 2], vec![2, 2, 2, 2], vec![2, 2, 2, 2]],
            Box::new(|g, v| {
                let mask = AttnMask {
                    batch: 2,
                    query_len: 3,
                    key_len: 3,
                    causal: true,
                    key_padding: Some(vec![false, false, false, false, false, true]),
                };
                Ok(attention_with_prefix(g, v[0], v[1], v[2], Some((v[3], v[4])), &mask)?.context)
            }),
        ),
    ]
}

/// Worst relative error per op over `points` random input draws.
pub fn op_suite(points: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, shapes, build)| {
            let mut worst = 0.0f64;
            for p in 0..points {
                let mut rng = stream(p, name);
                let inputs: Vec<DiffTensor<f64>> = shapes
                    .iter()
                    .map(|s| if name == "relu" { away_from_zero(&mut rng, s) } else { uniform(&mut rng, s, -1.0, 1.0) })
                    .collect();
                worst = worst.max(check(&inputs, build.as_ref()));
            }
            (name, worst)
        })
        .collect()
}

/// Worst relative error of the full model loss over `points` random
/// initializations, for the prefix-free model and both prefix forms.
pub fn model_suite(points: u64, coords_per_point: usize) -> Vec<(&'static str, f64)> {
    use super::fixtures::{tiny_batch, tiny_config};
    use transcoder::model::PrefixEncoderShape;
    let batch = tiny_batch();
    let cfg = tiny_config(12, 3);
    let mut out = Vec::new();
    for (name, form) in [("model-no-prefix", 0), ("model-flat-prefix", 1), ("model-encoder-prefix", 2)] {
        let mut worst = 0.0f64;
        for p in 0..points {
            let mut backbone = Backbone::<f64>::init(&cfg, 100 + p).unwrap();
            let mut rng = stream(p, name);
            let encoder = (form == 2).then_some(PrefixEncoderShape { embed_dim: 4, hidden: 6 });
            let mut bank = (form > 0).then(|| PrefixBank::<f64>::init(&cfg, 200 + p, encoder).unwrap());
            worst = worst.max(check_model(&mut backbone, bank.as_mut(), &batch, &mut rng, coords_per_point));
        }
        out.push((name, worst));
    }
    out
}
