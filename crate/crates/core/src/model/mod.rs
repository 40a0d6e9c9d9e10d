//! Encoder-decoder backbone with per-site knowledge-prefix injection.

mod attention;
mod backbone;
mod checkpoint;
mod config;
mod generate;
mod prefix;

pub use attention::{attention_with_prefix, AttnMask, AttnOutput, MASKED_SCORE};
pub use backbone::{Backbone, Batch, Mode, Provenance, LAYER_NORM_EPS};
pub use checkpoint::{BackboneSnapshot, Checkpoint, CheckpointKind, TensorRecord, FORMAT_VERSION};
pub use config::{AttentionSite, ModelConfig};
pub use generate::generate_greedy;
pub use prefix::{PrefixActivations, PrefixBank, PrefixEncoderShape};

use crate::autodiff::{DiffTensor, Graph, Real};
use crate::error::Result;

use backbone::bind_prefix;

/// Teacher-forced logits `[batch, target_len, vocab]` without recording
/// gradients for later use.
pub fn logits<F: Real>(
    backbone: &Backbone<F>,
    prefix: Option<&PrefixBank<F>>,
    batch: &Batch,
    mode: &mut Mode,
) -> Result<DiffTensor<F>> {
    let mut g = Graph::new();
    let b = backbone.bind(&mut g)?;
    let p = bind_prefix(&mut g, prefix, batch.size)?;
    let out = backbone.forward(&mut g, &b, p.as_ref().and_then(|(_, a)| a.as_ref()), batch, mode)?;
    Ok(g.to_tensor(out))
}

/// Mean token cross-entropy of a batch (padding excluded).
pub fn batch_loss<F: Real>(
    backbone: &Backbone<F>,
    prefix: Option<&PrefixBank<F>>,
    batch: &Batch,
    mode: &mut Mode,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = backbone.bind(&mut g)?;
    let p = bind_prefix(&mut g, prefix, batch.size)?;
    let out = backbone.forward(&mut g, &b, p.as_ref().and_then(|(_, a)| a.as_ref()), batch, mode)?;
    let loss = g.cross_entropy(out, &batch.labels, 0)?;
    Ok(g.value(loss)[0].as_f64())
}

/// Forward and backward pass over one batch. Gradients land in the
/// backbone's parameters and, when given, the prefix bank's.
pub fn loss_and_grads<F: Real>(
    backbone: &mut Backbone<F>,
    prefix: Option<&mut PrefixBank<F>>,
    batch: &Batch,
    mode: &mut Mode,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = backbone.bind(&mut g)?;
    let p = bind_prefix(&mut g, prefix.as_deref(), batch.size)?;
    let out = backbone.forward(&mut g, &b, p.as_ref().and_then(|(_, a)| a.as_ref()), batch, mode)?;
    let loss = g.cross_entropy(out, &batch.labels, 0)?;
    let value = g.value(loss)[0].as_f64();
    g.backward(loss)?;
    backbone.params_mut().collect_grads(&g, &b)?;
    if let (Some(bank), Some((pb, _))) = (prefix, p) {
        bank.params_mut().collect_grads(&g, &pb)?;
    }
    Ok(value)
}
