//! The knowledge prefix: one key/value pair of `[L × d_model]` arrays per
//! attention site, optionally generated by a small reparameterization
//! encoder.

use crate::autodiff::{init_uniform, Bound, DiffTensor, Graph, ParamId, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::rng::stream;

use super::config::{AttentionSite, ModelConfig};

/// Sizes of the reparameterization encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixEncoderShape {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl PrefixEncoderShape {
    pub fn for_config(config: &ModelConfig) -> Self {
        Self { embed_dim: config.d_model, hidden: 2 * config.d_model }
    }
}

#[derive(Debug, Clone)]
struct SiteHead {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Form {
    Flat {
        pairs: Vec<(ParamId, ParamId)>,
    },
    Encoder {
        embedding: ParamId,
        up_weight: ParamId,
        up_bias: ParamId,
        heads: Vec<(SiteHead, SiteHead)>,
    },
}

/// Prefix activations expanded to `[B, H, L, dh]` for every site.
#[derive(Debug, Clone)]
pub struct PrefixActivations {
    pairs: Vec<(Var, Var)>,
}

impl PrefixActivations {
    pub fn site(&self, config: &ModelConfig, site: AttentionSite) -> (Var, Var) {
        let ne = config.n_encoder_layers;
        let idx = match site {
            AttentionSite::EncoderSelf(l) => l,
            AttentionSite::DecoderSelf(l) => ne + 2 * l,
            AttentionSite::DecoderCross(l) => ne + 2 * l + 1,
        };
        self.pairs[idx]
    }
}

#[derive(Debug, Clone)]
pub struct PrefixBank<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    form: Form,
    seed: u64,
    provenance: String,
}

impl<F: Real> PrefixBank<F> {
    /// Random prefix `θ₀` from the `(seed, "prefix-init")` stream, drawn
    /// with the same uniform `±1/√fan_in` family as the backbone.
    pub fn init(config: &ModelConfig, seed: u64, encoder: Option<PrefixEncoderShape>) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "prefix-init");
        let mut params = ParamStore::new();
        let l = config.prefix_length;
        let d = config.d_model;
        let form = match encoder {
            Some(shape) if l > 0 => {
                if shape.embed_dim == 0 || shape.hidden == 0 {
                    return Err(Error::Config("prefix encoder sizes must be >= 1".into()));
                }
                let embedding = params.add("prefix.embedding", init_uniform(&mut rng, vec![l, shape.embed_dim], shape.embed_dim))?;
                let up_weight = params.add(
                    "prefix.up.weight",
                    init_uniform(&mut rng, vec![shape.embed_dim, shape.hidden], shape.embed_dim),
                )?;
                let up_bias = params.add("prefix.up.bias", DiffTensor::zeros(vec![shape.hidden]))?;
                let mut heads = Vec::new();
                for site in config.attention_sites() {
                    let mut head = |kind: &str| -> Result<SiteHead> {
                        let name = format!("prefix.{}.{kind}", site.name());
                        Ok(SiteHead {
                            weight: params.add(
                                format!("{name}.weight"),
                                init_uniform(&mut rng, vec![shape.hidden, d], shape.hidden),
                            )?,
                            bias: params.add(format!("{name}.bias"), DiffTensor::zeros(vec![d]))?,
                        })
                    };
                    let k = head("key")?;
                    let v = head("value")?;
                    heads.push((k, v));
                }
                Form::Encoder { embedding, up_weight, up_bias, heads }
            }
            _ => {
                let mut pairs = Vec::new();
                for site in config.attention_sites() {
                    let k = params.add(format!("prefix.{}.key", site.name()), init_uniform(&mut rng, vec![l, d], d))?;
                    let v = params.add(format!("prefix.{}.value", site.name()), init_uniform(&mut rng, vec![l, d], d))?;
                    pairs.push((k, v));
                }
                Form::Flat { pairs }
            }
        };
        Ok(Self { config: config.clone(), params, form, seed, provenance: "random-init".into() })
    }

    /// Rebuilds a bank from checkpoint tensors. The presence of
    /// `prefix.embedding` selects the encoder form.
    pub fn from_tensors(
        config: &ModelConfig,
        tensors: Vec<(String, DiffTensor<F>)>,
        seed: u64,
        provenance: String,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            if !name.starts_with("prefix.") {
                return Err(Error::Compatibility(format!("unexpected tensor {name} in prefix checkpoint")));
            }
            params.add(name, t)?;
        }
        let (l, d) = (config.prefix_length, config.d_model);
        let lookup = |name: String, shape: Option<&[usize]>| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Compatibility(format!("prefix checkpoint lacks {name}")))?;
            if let Some(shape) = shape {
                let got = params.get(id).shape();
                if got != shape {
                    return Err(Error::Compatibility(format!("{name} has shape {got:?}, expected {shape:?}")));
                }
            }
            Ok(id)
        };
        let sites = config.attention_sites();
        let form = if let Some(emb) = params.find("prefix.embedding") {
            let es = params.get(emb).shape().to_vec();
            if es.len() != 2 || es[0] != l {
                return Err(Error::Compatibility(format!(
                    "prefix length {} in checkpoint, {l} in config",
                    es.first().copied().unwrap_or(0)
                )));
            }
            let up_weight = lookup("prefix.up.weight".into(), None)?;
            let hidden = *params.get(up_weight).shape().last().unwrap_or(&0);
            let up_bias = lookup("prefix.up.bias".into(), Some(&[hidden]))?;
            let mut heads = Vec::new();
            for site in &sites {
                let head = |kind: &str| -> Result<SiteHead> {
                    let name = format!("prefix.{}.{kind}", site.name());
                    Ok(SiteHead {
                        weight: lookup(format!("{name}.weight"), Some(&[hidden, d]))?,
                        bias: lookup(format!("{name}.bias"), Some(&[d]))?,
                    })
                };
                heads.push((head("key")?, head("value")?));
            }
            Form::Encoder { embedding: emb, up_weight, up_bias, heads }
        } else {
            let mut pairs = Vec::new();
            for site in &sites {
                let key_name = format!("prefix.{}.key", site.name());
                let k = lookup(key_name.clone(), None)?;
                let ks = params.get(k).shape().to_vec();
                if ks.len() == 2 && ks[0] != l && ks[1] == d {
                    return Err(Error::Compatibility(format!(
                        "prefix length {} in checkpoint, {l} in config",
                        ks[0]
                    )));
                }
                let k = lookup(key_name, Some(&[l, d]))?;
                let v = lookup(format!("prefix.{}.value", site.name()), Some(&[l, d]))?;
                pairs.push((k, v));
            }
            Form::Flat { pairs }
        };
        let expected = match &form {
            Form::Flat { pairs } => pairs.len() * 2,
            Form::Encoder { heads, .. } => 3 + heads.len() * 4,
        };
        if params.len() != expected {
            return Err(Error::Compatibility(format!(
                "prefix checkpoint has {} tensors, expected {expected}",
                params.len()
            )));
        }
        Ok(Self { config: config.clone(), params, form, seed, provenance })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prefix_length(&self) -> usize {
        self.config.prefix_length
    }

    pub fn has_encoder(&self) -> bool {
        matches!(self.form, Form::Encoder { .. })
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

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Result<Bound> {
        self.params.bind(g)
    }

    /// Per-site `[L × d_model]` key and value arrays.
    fn site_arrays(&self, g: &mut Graph<F>, b: &Bound) -> Result<Vec<(Var, Var)>> {
        match &self.form {
            Form::Flat { pairs } => Ok(pairs.iter().map(|&(k, v)| (b.get(k), b.get(v))).collect()),
            Form::Encoder { embedding, up_weight, up_bias, heads } => {
                let h = g.matmul(b.get(*embedding), b.get(*up_weight))?;
                let h = g.add_bias(h, b.get(*up_bias))?;
                let h = g.tanh(h)?;
                let mut out = Vec::with_capacity(heads.len());
                for (kh, vh) in heads {
                    let k = g.matmul(h, b.get(kh.weight))?;
                    let k = g.add_bias(k, b.get(kh.bias))?;
                    let v = g.matmul(h, b.get(vh.weight))?;
                    let v = g.add_bias(v, b.get(vh.bias))?;
                    out.push((k, v));
                }
                Ok(out)
            }
        }
    }

    /// Expands every site's prefix to `[batch, heads, L, head_dim]`.
    /// Returns `None` for a zero-length prefix, which leaves the model a
    /// vanilla transformer.
    pub fn activations(&self, g: &mut Graph<F>, b: &Bound, batch: usize) -> Result<Option<PrefixActivations>> {
        if self.config.prefix_length == 0 {
            return Ok(None);
        }
        let (l, h, dh) = (self.config.prefix_length, self.config.n_heads, self.config.head_dim());
        let mut pairs = Vec::new();
        for (k, v) in self.site_arrays(g, b)? {
            let mut expand = |x: Var| -> Result<Var> {
                let x = g.reshape(x, vec![l, h, dh])?;
                let x = g.permute(x, &[1, 0, 2])?;
                g.broadcast_lead(x, batch)
            };
            let k = expand(k)?;
            let v = expand(v)?;
            pairs.push((k, v));
        }
        Ok(Some(PrefixActivations { pairs }))
    }

    /// Materializes the encoder's output as flat per-site arrays and drops
    /// the encoder. Returns `false` (and logs a warning) when already flat.
    pub fn collapse(&mut self) -> Result<bool> {
        if !self.has_encoder() {
            log::warn!("prefix bank is already collapsed; nothing to do");
            return Ok(false);
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g)?;
        let arrays = self.site_arrays(&mut g, &b)?;
        let mut params = ParamStore::new();
        let mut pairs = Vec::new();
        for (site, (k, v)) in self.config.attention_sites().iter().zip(arrays) {
            let kt = g.to_tensor(k);
            let vt = g.to_tensor(v);
            let k = params.add(format!("prefix.{}.key", site.name()), kt)?;
            let v = params.add(format!("prefix.{}.value", site.name()), vt)?;
            pairs.push((k, v));
        }
        self.params = params;
        self.form = Form::Flat { pairs };
        Ok(true)
    }

    pub fn cast<G: Real>(&self) -> PrefixBank<G> {
        PrefixBank {
            config: self.config.clone(),
            params: self.params.cast(),
            form: self.form.clone(),
            seed: self.seed,
            provenance: self.provenance.clone(),
        }
    }
}
