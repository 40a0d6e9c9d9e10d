use transcoder::data::{build_vocab, generate_minilang_corpus, Corpus, Language, RawCorpus, TaskKind, Vocab};
use transcoder::model::{Batch, ModelConfig};

pub fn tiny_config(vocab_size: usize, prefix_length: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 16,
        max_source_len: 64,
        max_target_len: 64,
        prefix_length,
        dropout_rate: 0.0,
    }
}

/// Two rows of different lengths so padding is exercised.
pub fn tiny_batch() -> Batch {
    let s0: &[u32] = &[5, 6, 7, 2];
    let s1: &[u32] = &[8, 9, 2];
    let t0: &[u32] = &[1, 10, 11, 2];
    let t1: &[u32] = &[1, 4, 2];
    Batch::new(&[s0, s1], &[t0, t1], 0).unwrap()
}

pub struct Corpora {
    pub vocab: Vocab,
    pub raw: Vec<RawCorpus>,
    pub encoded: Vec<Corpus>,
}

/// Small corpora over both languages and all three task kinds.
pub fn small_corpora(train: usize, dev: usize, test: usize, seed: u64) -> Corpora {
    let mut raw = Vec::new();
    for lang in [Language::Alpha, Language::Beta] {
        for kind in [TaskKind::Summarization, TaskKind::Translation, TaskKind::Classification] {
            raw.push(generate_minilang_corpus(lang, kind, train, dev, test, seed).unwrap());
        }
    }
    let refs: Vec<&RawCorpus> = raw.iter().collect();
    let vocab = build_vocab(&refs).unwrap();
    let encoded = raw.iter().map(|r| r.encode(&vocab).unwrap()).collect();
    Corpora { vocab, raw, encoded }
}

impl Corpora {
    pub fn get(&self, id: &str) -> &Corpus {
        self.encoded.iter().find(|c| c.spec.task_id == id).unwrap()
    }
}
