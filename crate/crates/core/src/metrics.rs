//! Smoothed corpus BLEU-4, accuracy, and model evaluation on a split.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::{Example, TaskKind, TaskSpec, BOS, EOS, LABELS, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, Backbone, PrefixBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu4,
    Accuracy,
}

impl Metric {
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification => Metric::Accuracy,
            _ => Metric::Bleu4,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Bleu4 => "bleu4",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_id: String,
    pub metric: Metric,
    pub value: f64,
    pub n_examples: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 in `[0, 100]`.
///
/// Clipped n-gram matches are summed over the corpus. Unigram precision is
/// unsmoothed, orders 2 to 4 use `(m + 1) / (c + 1)`, and the brevity
/// penalty is `exp(1 - r/c)` when the hypothesis total `c` is shorter than
/// the reference total `r`.
pub fn bleu4_smoothed<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (gram, &c) in &ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 || hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_sum += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

pub fn accuracy<T: PartialEq>(predicted: &[T], gold: &[T]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Input("accuracy needs at least one prediction".into()));
    }
    if predicted.len() != gold.len() {
        return Err(Error::Input(format!("{} predictions but {} gold labels", predicted.len(), gold.len())));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Strips BOS and everything from the first EOS on.
fn body(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .skip_while(|&t| t == BOS)
        .take_while(|&t| t != EOS)
        .filter(|&t| t != PAD)
        .collect()
}

/// Decodes every example greedily and scores it.
///
/// Generation tasks score BLEU-4 over the decoded tokens. Classification
/// takes the first generated token, with the argmax restricted to the label
/// tokens, and scores accuracy against the gold label.
pub fn evaluate<F: Real>(
    backbone: &Backbone<F>,
    prefix: Option<&PrefixBank<F>>,
    task: &TaskSpec,
    examples: &[Example],
    batch_size: usize,
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Input(format!("no examples to evaluate for {}", task.task_id)));
    }
    let batch_size = batch_size.max(1);
    let metric = Metric::for_kind(task.kind);
    let label_ids: Vec<u32> = (RESERVED.len()..RESERVED.len() + LABELS.len()).map(|i| i as u32).collect();
    let (max_len, allowed) = match metric {
        Metric::Accuracy => (1, Some(label_ids.as_slice())),
        Metric::Bleu4 => (backbone.config().max_target_len, None),
    };
    let mut hyps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size) {
        let sources: Vec<&[u32]> = chunk.iter().map(|e| e.source_tokens.as_slice()).collect();
        let out = generate_greedy(backbone, prefix, &sources, max_len, BOS, EOS, PAD, allowed)?;
        hyps.extend(out.iter().map(|o| body(o)));
    }
    let refs: Vec<Vec<u32>> = examples.iter().map(|e| body(&e.target_tokens)).collect();
    let value = match metric {
        Metric::Bleu4 => bleu4_smoothed(&hyps, &refs)?,
        Metric::Accuracy => {
            let pred: Vec<Option<u32>> = hyps.iter().map(|h| h.first().copied()).collect();
            let gold: Vec<Option<u32>> = refs.iter().map(|r| r.first().copied()).collect();
            accuracy(&pred, &gold)?
        }
    };
    Ok(EvalResult { task_id: task.task_id.clone(), metric, value, n_examples: examples.len() })
}

/// Plain-text table: one row per `(label, result)`.
pub fn format_table(rows: &[(String, EvalResult)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  {:<28}  {:<8}  {:>9}  {:>6}\n", "run", "task", "metric", "value", "n");
    for (label, r) in rows {
        s.push_str(&format!(
            "{:<width$}  {:<28}  {:<8}  {:>9.4}  {:>6}\n",
            label,
            r.task_id,
            r.metric.as_str(),
            r.value,
            r.n_examples
        ));
    }
    s
}
