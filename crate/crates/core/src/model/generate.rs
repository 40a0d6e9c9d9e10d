use crate::autodiff::{Graph, Real};
use crate::error::{Error, Result};

use super::backbone::{bind_prefix, Backbone, Mode};
use super::prefix::PrefixBank;

/// Greedy decoding for a batch of sources.
///
/// Every row starts from `bos` and extends with the argmax token (lowest id
/// on ties) until it emits `eos` or reaches `max_len` generated tokens. The
/// returned sequences exclude `bos` and include `eos` when it was produced.
/// With `allowed`, the argmax is restricted to those ids.
#[allow(clippy::too_many_arguments)]
pub fn generate_greedy<F: Real>(
    backbone: &Backbone<F>,
    prefix: Option<&PrefixBank<F>>,
    sources: &[&[u32]],
    max_len: usize,
    bos: u32,
    eos: u32,
    pad: u32,
    allowed: Option<&[u32]>,
) -> Result<Vec<Vec<u32>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(i) = sources.iter().position(|s| s.is_empty()) {
        return Err(Error::Input(format!("empty source sequence at row {i}")));
    }
    let config = backbone.config();
    let max_len = max_len.min(config.max_target_len);
    let batch = sources.len();
    let source_len = sources.iter().map(|s| s.len()).max().unwrap();
    let mut source = vec![pad as usize; batch * source_len];
    for (b, s) in sources.iter().enumerate() {
        for (j, &t) in s.iter().enumerate() {
            source[b * source_len + j] = t as usize;
        }
    }
    let vocab = config.vocab_size;
    let mut g = Graph::new();
    let bound = backbone.bind(&mut g)?;
    let prefix_state = bind_prefix(&mut g, prefix, batch)?;
    let acts = prefix_state.as_ref().and_then(|(_, a)| a.as_ref());
    let mut mode = Mode::Eval;
    let encoded = backbone.encode(&mut g, &bound, acts, &source, batch, &mut mode)?;
    let mark = g.len();

    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); batch];
    let mut done = vec![false; batch];
    for step in 0..max_len {
        let len = step + 1;
        let mut decoder_input = vec![pad as usize; batch * len];
        for b in 0..batch {
            decoder_input[b * len] = bos as usize;
            for (j, &t) in outputs[b].iter().enumerate() {
                decoder_input[b * len + j + 1] = t as usize;
            }
        }
        let logits = backbone.decode(&mut g, &bound, acts, encoded, &source, &decoder_input, batch, &mut mode)?;
        let values = g.value(logits);
        for b in 0..batch {
            if done[b] {
                continue;
            }
            let row = &values[(b * len + step) * vocab..(b * len + step + 1) * vocab];
            let next = match allowed {
                Some(ids) => argmax_among(row, ids),
                None => argmax_among(row, &(0..vocab as u32).collect::<Vec<_>>()),
            };
            outputs[b].push(next);
            if next == eos {
                done[b] = true;
            }
        }
        g.truncate(mark);
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}

fn argmax_among<F: Real>(row: &[F], ids: &[u32]) -> u32 {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    for &id in &sorted[1..] {
        if row[id as usize] > row[best as usize] {
            best = id;
        }
    }
    best
}
