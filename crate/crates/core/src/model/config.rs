use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder-decoder backbone and of the prefix it accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub prefix_length: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 256,
            max_source_len: 64,
            max_target_len: 64,
            prefix_length: 32,
            dropout_rate: 0.1,
        }
    }
}

/// One attention module that receives its own key/value prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionSite {
    EncoderSelf(usize),
    DecoderSelf(usize),
    DecoderCross(usize),
}

impl AttentionSite {
    pub fn name(&self) -> String {
        match self {
            AttentionSite::EncoderSelf(l) => format!("enc.{l}.self"),
            AttentionSite::DecoderSelf(l) => format!("dec.{l}.self"),
            AttentionSite::DecoderCross(l) => format!("dec.{l}.cross"),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_ff", self.d_ff),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Attention sites in canonical order: encoder self-attention layers,
    /// then per decoder layer its self- and cross-attention.
    pub fn attention_sites(&self) -> Vec<AttentionSite> {
        let mut sites: Vec<_> = (0..self.n_encoder_layers).map(AttentionSite::EncoderSelf).collect();
        for l in 0..self.n_decoder_layers {
            sites.push(AttentionSite::DecoderSelf(l));
            sites.push(AttentionSite::DecoderCross(l));
        }
        sites
    }

    /// True when a backbone built for `other` can be loaded under `self`.
    /// Prefix length and dropout do not shape backbone parameters.
    pub fn backbone_compatible(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.d_model == other.d_model
            && self.n_heads == other.n_heads
            && self.n_encoder_layers == other.n_encoder_layers
            && self.n_decoder_layers == other.n_decoder_layers
            && self.d_ff == other.d_ff
            && self.max_source_len == other.max_source_len
            && self.max_target_len == other.max_target_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_has_six_sites() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.attention_sites().len(), 6);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig { n_heads: 5, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
