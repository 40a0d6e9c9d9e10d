use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
/// Classification label tokens. They always follow the reserved ids.
pub const LABELS: [&str; 2] = ["buggy", "clean"];

/// Token ↔ id bijection with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Reserved tokens, then labels, then `words` in lexicographic order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let fixed: BTreeSet<&str> = RESERVED.iter().chain(LABELS.iter()).copied().collect();
        let rest: BTreeSet<&str> = words.into_iter().filter(|w| !fixed.contains(w)).collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .chain(LABELS.iter())
            .copied()
            .chain(rest)
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("constructed vocab is a bijection")
    }

    /// Rebuilds a vocab from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, want) in RESERVED.iter().chain(LABELS.iter()).enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Data(format!("vocab id {i} must be {want:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("vocab token {t:?} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn label_ids(&self) -> Vec<u32> {
        (RESERVED.len()..RESERVED.len() + LABELS.len()).map(|i| i as u32).collect()
    }

    /// Whitespace tokenization; unknown tokens map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Encoder input: tokens followed by EOS. Empty sources are rejected.
    pub fn encode_source(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = self.encode(text);
        if ids.is_empty() {
            return Err(Error::Data("empty source text".into()));
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Decoder sequence: BOS, tokens, EOS.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() / 2 + 2);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Joins tokens with single spaces, skipping PAD and BOS and stopping
    /// at the first EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out: Vec<&str> = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => out.push(self.token(id).unwrap_or(RESERVED[UNK as usize])),
            }
        }
        out.join(" ")
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() }).expect("vocab serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text)?;
        Self::from_tokens(f.tokens)
    }
}
