//! Scaled dot-product attention with an optional key/value prefix.

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

/// Large negative score added to masked positions. Finite so the tape's
/// non-finite check never trips; `exp` of it underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e9;

/// Which sequence positions a query may attend to. Prefix positions are
/// never masked.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    /// Query `i` sees key `j` only when `j <= i`.
    pub causal: bool,
    /// `[batch × key_len]`, true where the key is padding.
    pub key_padding: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn unmasked(batch: usize, query_len: usize, key_len: usize) -> Self {
        Self { batch, query_len, key_len, causal: false, key_padding: None }
    }

    /// Additive mask of shape `[batch, heads, query_len, prefix_len + key_len]`.
    fn materialize<F: Real>(&self, heads: usize, prefix_len: usize) -> Vec<F> {
        let total = prefix_len + self.key_len;
        let neg = F::of(MASKED_SCORE);
        let mut row_block = vec![F::zero(); self.query_len * total];
        let mut out = Vec::with_capacity(self.batch * heads * self.query_len * total);
        for b in 0..self.batch {
            for i in 0..self.query_len {
                for j in 0..self.key_len {
                    let padded = self
                        .key_padding
                        .as_ref()
                        .is_some_and(|p| p[b * self.key_len + j]);
                    let hidden = padded || (self.causal && j > i);
                    row_block[i * total + prefix_len + j] = if hidden { neg } else { F::zero() };
                }
            }
            for _ in 0..heads {
                out.extend_from_slice(&row_block);
            }
        }
        out
    }
}

/// Output of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttnOutput {
    /// `[batch, heads, query_len, head_dim]`
    pub context: Var,
    /// `[batch, heads, query_len, prefix_len + key_len]`
    pub weights: Var,
}

/// Attention over `[prefix ; sequence]`.
///
/// `queries` is `[B, H, T, dh]`, `keys`/`values` are `[B, H, S, dh]` and the
/// prefix pair, when present, is `[B, H, L, dh]`. Keys become
/// `[prefix_keys ; keys]` and values `[prefix_values ; values]`.
pub fn attention_with_prefix<F: Real>(
    g: &mut Graph<F>,
    queries: Var,
    keys: Var,
    values: Var,
    prefix_kv: Option<(Var, Var)>,
    mask: &AttnMask,
) -> Result<AttnOutput> {
    let qs = g.shape(queries).to_vec();
    let ks = g.shape(keys).to_vec();
    if qs.len() != 4 || ks.len() != 4 || g.shape(values) != ks.as_slice() {
        return Err(Error::Shape(format!(
            "attention expects [B,H,T,dh] operands, got q {qs:?} k {ks:?} v {:?}",
            g.shape(values)
        )));
    }
    let (batch, heads, query_len, head_dim) = (qs[0], qs[1], qs[2], qs[3]);
    if ks[0] != batch || ks[1] != heads || ks[3] != head_dim {
        return Err(Error::Shape(format!("keys {ks:?} do not match queries {qs:?}")));
    }
    if mask.batch != batch || mask.query_len != query_len || mask.key_len != ks[2] {
        return Err(Error::Shape(format!(
            "mask for batch {} / {}×{} does not match q {qs:?} k {ks:?}",
            mask.batch, mask.query_len, mask.key_len
        )));
    }
    let (keys, values, prefix_len) = match prefix_kv {
        Some((pk, pv)) => {
            let ps = g.shape(pk).to_vec();
            if ps.len() != 4 || ps[0] != batch || ps[1] != heads || ps[3] != head_dim || g.shape(pv) != ps.as_slice() {
                return Err(Error::Shape(format!(
                    "prefix pair {ps:?} / {:?} incompatible with keys {ks:?}",
                    g.shape(pv)
                )));
            }
            (g.concat(&[pk, keys], 2)?, g.concat(&[pv, values], 2)?, ps[2])
        }
        None => (keys, values, 0),
    };
    let kt = g.transpose_last(keys)?;
    let scores = g.matmul(queries, kt)?;
    let scores = g.scale(scores, F::of(1.0 / (head_dim as f64).sqrt()))?;
    let shape = g.shape(scores).to_vec();
    let additive = g.constant(shape, mask.materialize(heads, prefix_len))?;
    let scores = g.add(scores, additive)?;
    let weights = g.softmax(scores, 3)?;
    let context = g.matmul(weights, values)?;
    Ok(AttnOutput { context, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    fn random(g: &mut Graph<f64>, shape: Vec<usize>, seed: u64) -> Var {
        let mut rng = stream(seed, "attn-test");
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.input(shape, data, false).unwrap()
    }

    #[test]
    fn prefix_of_thirty_two_extends_rows_to_forty_eight() {
        let mut g = Graph::<f64>::new();
        let q = random(&mut g, vec![2, 4, 16, 8], 1);
        let k = random(&mut g, vec![2, 4, 16, 8], 2);
        let v = random(&mut g, vec![2, 4, 16, 8], 3);
        let pk = random(&mut g, vec![2, 4, 32, 8], 4);
        let pv = random(&mut g, vec![2, 4, 32, 8], 5);
        let mask = AttnMask { causal: true, ..AttnMask::unmasked(2, 16, 16) };
        let out = attention_with_prefix(&mut g, q, k, v, Some((pk, pv)), &mask).unwrap();
        assert_eq!(g.shape(out.weights), &[2, 4, 16, 48]);
        for row in g.value(out.weights).chunks(48) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&w| w >= 0.0));
            // causal masking never reaches the prefix block
            assert!(row[..32].iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn empty_prefix_is_bit_identical_to_vanilla() {
        let mut g = Graph::<f32>::new();
        let data = |n: usize, s: f32| (0..n).map(|i| ((i as f32) * s).sin()).collect::<Vec<_>>();
        let q = g.input(vec![1, 2, 5, 4], data(40, 0.3), false).unwrap();
        let k = g.input(vec![1, 2, 5, 4], data(40, 0.7), false).unwrap();
        let v = g.input(vec![1, 2, 5, 4], data(40, 1.1), false).unwrap();
        let pk = g.input(vec![1, 2, 0, 4], vec![], false).unwrap();
        let pv = g.input(vec![1, 2, 0, 4], vec![], false).unwrap();
        let mask = AttnMask { causal: true, ..AttnMask::unmasked(1, 5, 5) };
        let a = attention_with_prefix(&mut g, q, k, v, None, &mask).unwrap();
        let b = attention_with_prefix(&mut g, q, k, v, Some((pk, pv)), &mask).unwrap();
        assert_eq!(g.value(a.context), g.value(b.context));
    }

    #[test]
    fn negligible_prefix_mass_matches_vanilla() {
        let mut g = Graph::<f64>::new();
        let raw = random(&mut g, vec![1, 2, 6, 4], 11);
        // strictly positive queries against strongly negative prefix keys
        let qdata: Vec<f64> = g.value(raw).iter().map(|x| x.abs() + 0.1).collect();
        let q = g.input(vec![1, 2, 6, 4], qdata, false).unwrap();
        let k = random(&mut g, vec![1, 2, 6, 4], 12);
        let v = random(&mut g, vec![1, 2, 6, 4], 13);
        let pk_data = vec![-1000.0; 24];
        let pk = g.input(vec![1, 2, 3, 4], pk_data, false).unwrap();
        let pv = g.input(vec![1, 2, 3, 4], vec![0.0; 24], false).unwrap();
        let mask = AttnMask::unmasked(1, 6, 6);
        let vanilla = attention_with_prefix(&mut g, q, k, v, None, &mask).unwrap();
        let with = attention_with_prefix(&mut g, q, k, v, Some((pk, pv)), &mask).unwrap();
        let w = g.value(with.weights);
        for row in w.chunks(9) {
            assert!(row[..3].iter().sum::<f64>() < 1e-6);
        }
        for (a, b) in g.value(vanilla.context).iter().zip(g.value(with.context)) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn prefix_shape_mismatch_is_shape_error() {
        let mut g = Graph::<f64>::new();
        let q = random(&mut g, vec![1, 2, 3, 4], 1);
        let pk = random(&mut g, vec![1, 2, 3, 5], 2);
        let mask = AttnMask::unmasked(1, 3, 3);
        let r = attention_with_prefix(&mut g, q, q, q, Some((pk, pk)), &mask);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
