//! Pre-norm encoder-decoder transformer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init_uniform, Bound, DiffTensor, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

use super::attention::{attention_with_prefix, AttnMask};
use super::config::{AttentionSite, ModelConfig};
use super::prefix::{PrefixActivations, PrefixBank};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Where a backbone's parameters came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RandomInit,
    BasePretrained,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::RandomInit => "random-init",
            Provenance::BasePretrained => "base-pretrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random-init" => Ok(Provenance::RandomInit),
            "base-pretrained" => Ok(Provenance::BasePretrained),
            other => Err(Error::Compatibility(format!("unknown backbone provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AttnBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: AttnBlock,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: AttnBlock,
    cross_norm: Norm,
    cross_attn: AttnBlock,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    lm_head: Linear,
}

/// How dropout behaves during a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// A padded teacher-forcing batch. Decoder inputs are the targets without
/// their last token; labels are the targets without their first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub source_len: usize,
    pub target_len: usize,
    pub source: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(sources: &[&[u32]], targets: &[&[u32]], pad: u32) -> Result<Self> {
        if sources.is_empty() || sources.len() != targets.len() {
            return Err(Error::Input(format!(
                "batch needs matching non-empty sources/targets, got {} and {}",
                sources.len(),
                targets.len()
            )));
        }
        if let Some(i) = sources.iter().position(|s| s.is_empty()) {
            return Err(Error::Input(format!("empty source sequence at batch row {i}")));
        }
        if let Some(i) = targets.iter().position(|t| t.len() < 2) {
            return Err(Error::Input(format!("target at batch row {i} shorter than BOS+EOS")));
        }
        let size = sources.len();
        let source_len = sources.iter().map(|s| s.len()).max().unwrap();
        let target_len = targets.iter().map(|t| t.len() - 1).max().unwrap();
        let pad = pad as usize;
        let mut source = vec![pad; size * source_len];
        let mut decoder_input = vec![pad; size * target_len];
        let mut labels = vec![pad; size * target_len];
        for (b, (s, t)) in sources.iter().zip(targets).enumerate() {
            for (j, &tok) in s.iter().enumerate() {
                source[b * source_len + j] = tok as usize;
            }
            for j in 0..t.len() - 1 {
                decoder_input[b * target_len + j] = t[j] as usize;
                labels[b * target_len + j] = t[j + 1] as usize;
            }
        }
        Ok(Self { size, source_len, target_len, source, decoder_input, labels })
    }
}

/// Sinusoidal position table `[len × d]`.
fn positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * rate;
            out[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

struct Registrar<'a, F> {
    store: &'a mut ParamStore<F>,
    make: &'a mut dyn FnMut(&str, Vec<usize>, usize) -> Result<DiffTensor<F>>,
}

impl<F: Real> Registrar<'_, F> {
    fn param(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let t = (self.make)(name, shape, fan_in)?;
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.param(&format!("{name}.weight"), vec![fan_in, fan_out], fan_in)?,
            bias: self.param(&format!("{name}.bias"), vec![fan_out], fan_in)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.param(&format!("{name}.gain"), vec![d], d)?,
            bias: self.param(&format!("{name}.bias"), vec![d], d)?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<AttnBlock> {
        Ok(AttnBlock {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            out: self.linear(&format!("{name}.out"), d, d)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden)?,
            down: self.linear(&format!("{name}.down"), hidden, d)?,
        })
    }
}

/// The trainable encoder-decoder: the "CodePTM" every prefix is attached to.
#[derive(Debug, Clone)]
pub struct Backbone<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
    seed: u64,
    provenance: Provenance,
}

impl<F: Real> Backbone<F> {
    /// Fresh parameters from the `(seed, "backbone-init")` stream: uniform
    /// `±1/√fan_in` weights, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "backbone-init");
        let mut params = ParamStore::new();
        let layout = Self::register(config, &mut params, &mut |name, shape, fan_in| {
            let t = if name.ends_with(".gain") {
                DiffTensor::from_f64(shape.clone(), &vec![1.0; shape.iter().product()])
                    .expect("finite")
            } else if name.ends_with(".bias") {
                DiffTensor::zeros(shape)
            } else {
                init_uniform(&mut rng, shape, fan_in)
            };
            Ok(t)
        })?;
        Ok(Self { config: config.clone(), params, layout, seed, provenance: Provenance::RandomInit })
    }

    /// Builds a backbone from named tensors, checking every expected name
    /// and shape.
    pub fn from_named(
        config: &ModelConfig,
        tensors: &mut dyn FnMut(&str, &[usize]) -> Result<DiffTensor<F>>,
        seed: u64,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Self::register(config, &mut params, &mut |name, shape, _| tensors(name, &shape))?;
        Ok(Self { config: config.clone(), params, layout, seed, provenance })
    }

    fn register(
        c: &ModelConfig,
        store: &mut ParamStore<F>,
        make: &mut dyn FnMut(&str, Vec<usize>, usize) -> Result<DiffTensor<F>>,
    ) -> Result<Layout> {
        let mut r = Registrar { store, make };
        let d = c.d_model;
        let embed = r.param("embed.weight", vec![c.vocab_size, d], d)?;
        let encoder = (0..c.n_encoder_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Ok(EncoderLayer {
                    attn_norm: r.norm(&format!("{p}.attn_norm"), d)?,
                    attn: r.attn(&format!("{p}.self_attn"), d)?,
                    ff_norm: r.norm(&format!("{p}.ff_norm"), d)?,
                    ff: r.ff(&format!("{p}.ff"), d, c.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = r.norm("enc.final_norm", d)?;
        let decoder = (0..c.n_decoder_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                Ok(DecoderLayer {
                    self_norm: r.norm(&format!("{p}.self_norm"), d)?,
                    self_attn: r.attn(&format!("{p}.self_attn"), d)?,
                    cross_norm: r.norm(&format!("{p}.cross_norm"), d)?,
                    cross_attn: r.attn(&format!("{p}.cross_attn"), d)?,
                    ff_norm: r.norm(&format!("{p}.ff_norm"), d)?,
                    ff: r.ff(&format!("{p}.ff"), d, c.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = r.norm("dec.final_norm", d)?;
        let lm_head = r.linear("lm_head", d, c.vocab_size)?;
        Ok(Layout { embed, encoder, encoder_norm, decoder, decoder_norm, lm_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = provenance;
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn cast<G: Real>(&self) -> Backbone<G> {
        Backbone {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            seed: self.seed,
            provenance: self.provenance,
        }
    }
}

impl<F: Real> Backbone<F> {
    pub fn bind(&self, g: &mut Graph<F>) -> Result<Bound> {
        self.params.bind(g)
    }

    fn linear(&self, g: &mut Graph<F>, b: &Bound, l: &Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.get(l.weight))?;
        g.add_bias(y, b.get(l.bias))
    }

    fn norm(&self, g: &mut Graph<F>, b: &Bound, n: &Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, b.get(n.gain), b.get(n.bias), LAYER_NORM_EPS)
    }

    fn dropout(&self, g: &mut Graph<F>, x: Var, mode: &mut Mode) -> Result<Var> {
        let rate = self.config.dropout_rate;
        let Mode::Train(rng) = mode else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let m = g.constant(g.shape(x).to_vec(), mask)?;
        g.mul(x, m)
    }

    fn embed(&self, g: &mut Graph<F>, b: &Bound, ids: &[usize], batch: usize, len: usize, mode: &mut Mode) -> Result<Var> {
        let d = self.config.d_model;
        let rows = g.embedding(b.get(self.layout.embed), ids)?;
        let rows = g.reshape(rows, vec![batch, len, d])?;
        let rows = g.scale(rows, F::of((d as f64).sqrt()))?;
        let table = positions(len, d);
        let mut pos = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            pos.extend(table.iter().map(|&x| F::of(x)));
        }
        let pos = g.constant(vec![batch, len, d], pos)?;
        let x = g.add(rows, pos)?;
        self.dropout(g, x, mode)
    }

    fn split_heads(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, vec![s[0], s[1], self.config.n_heads, self.config.head_dim()])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    fn merge_heads(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, vec![s[0], s[2], self.config.d_model])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        blk: &AttnBlock,
        query_in: Var,
        kv_in: Var,
        prefix: Option<(Var, Var)>,
        mask: &AttnMask,
    ) -> Result<Var> {
        let q = self.linear(g, b, &blk.q, query_in)?;
        let k = self.linear(g, b, &blk.k, kv_in)?;
        let v = self.linear(g, b, &blk.v, kv_in)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let out = attention_with_prefix(g, q, k, v, prefix, mask)?;
        let merged = self.merge_heads(g, out.context)?;
        self.linear(g, b, &blk.out, merged)
    }

    fn feed_forward(&self, g: &mut Graph<F>, b: &Bound, ff: &FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(g, b, &ff.up, x)?;
        let h = g.relu(h)?;
        self.linear(g, b, &ff.down, h)
    }

    fn site_prefix(&self, prefix: Option<&PrefixActivations>, site: AttentionSite) -> Option<(Var, Var)> {
        prefix.map(|p| p.site(&self.config, site))
    }

    /// Encoder pass over `source` (`[batch × source_len]`, padded with 0).
    /// Returns the final-normed encoder states `[batch, source_len, d]`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        prefix: Option<&PrefixActivations>,
        source: &[usize],
        batch: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let source_len = source.len() / batch.max(1);
        if source_len == 0 || source_len * batch != source.len() {
            return Err(Error::Input(format!("source of {} tokens is not a {batch}-row batch", source.len())));
        }
        if source_len > self.config.max_source_len {
            return Err(Error::Input(format!(
                "source length {source_len} exceeds max_source_len {}",
                self.config.max_source_len
            )));
        }
        let mask = AttnMask {
            batch,
            query_len: source_len,
            key_len: source_len,
            causal: false,
            key_padding: Some(source.iter().map(|&t| t == 0).collect()),
        };
        let mut x = self.embed(g, b, source, batch, source_len, mode)?;
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let h = self.norm(g, b, &layer.attn_norm, x)?;
            let p = self.site_prefix(prefix, AttentionSite::EncoderSelf(l));
            let a = self.attention(g, b, &layer.attn, h, h, p, &mask)?;
            let a = self.dropout(g, a, mode)?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, &layer.ff_norm, x)?;
            let f = self.feed_forward(g, b, &layer.ff, h)?;
            let f = self.dropout(g, f, mode)?;
            x = g.add(x, f)?;
        }
        self.norm(g, b, &self.layout.encoder_norm, x)
    }

    /// Decoder pass with teacher forcing. Returns logits
    /// `[batch, target_len, vocab]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        prefix: Option<&PrefixActivations>,
        encoded: Var,
        source: &[usize],
        decoder_input: &[usize],
        batch: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let source_len = source.len() / batch.max(1);
        let target_len = decoder_input.len() / batch.max(1);
        if target_len == 0 || target_len * batch != decoder_input.len() {
            return Err(Error::Input(format!(
                "decoder input of {} tokens is not a {batch}-row batch",
                decoder_input.len()
            )));
        }
        if target_len > self.config.max_target_len {
            return Err(Error::Input(format!(
                "target length {target_len} exceeds max_target_len {}",
                self.config.max_target_len
            )));
        }
        let self_mask = AttnMask { causal: true, ..AttnMask::unmasked(batch, target_len, target_len) };
        let cross_mask = AttnMask {
            key_padding: Some(source.iter().map(|&t| t == 0).collect()),
            ..AttnMask::unmasked(batch, target_len, source_len)
        };
        let mut y = self.embed(g, b, decoder_input, batch, target_len, mode)?;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm(g, b, &layer.self_norm, y)?;
            let p = self.site_prefix(prefix, AttentionSite::DecoderSelf(l));
            let a = self.attention(g, b, &layer.self_attn, h, h, p, &self_mask)?;
            let a = self.dropout(g, a, mode)?;
            y = g.add(y, a)?;
            let h = self.norm(g, b, &layer.cross_norm, y)?;
            let p = self.site_prefix(prefix, AttentionSite::DecoderCross(l));
            let a = self.attention(g, b, &layer.cross_attn, h, encoded, p, &cross_mask)?;
            let a = self.dropout(g, a, mode)?;
            y = g.add(y, a)?;
            let h = self.norm(g, b, &layer.ff_norm, y)?;
            let f = self.feed_forward(g, b, &layer.ff, h)?;
            let f = self.dropout(g, f, mode)?;
            y = g.add(y, f)?;
        }
        let y = self.norm(g, b, &self.layout.decoder_norm, y)?;
        self.linear(g, b, &self.layout.lm_head, y)
    }

    /// Full teacher-forced forward pass, returning logits
    /// `[batch, target_len, vocab]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        prefix: Option<&PrefixActivations>,
        batch: &Batch,
        mode: &mut Mode,
    ) -> Result<Var> {
        let enc = self.encode(g, b, prefix, &batch.source, batch.size, mode)?;
        self.decode(g, b, prefix, enc, &batch.source, &batch.decoder_input, batch.size, mode)
    }
}

/// Binds the prefix bank (if any) on `g` and expands it for `batch` rows.
/// Returns the bound prefix parameters so their gradients can be collected.
pub(crate) fn bind_prefix<F: Real>(
    g: &mut Graph<F>,
    prefix: Option<&PrefixBank<F>>,
    batch: usize,
) -> Result<Option<(Bound, Option<PrefixActivations>)>> {
    let Some(p) = prefix else { return Ok(None) };
    let bound = p.bind(g)?;
    let acts = p.activations(g, &bound, batch)?;
    Ok(Some((bound, acts)))
}
