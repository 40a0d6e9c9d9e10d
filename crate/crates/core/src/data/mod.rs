//! Synthetic task corpora, tokenization, JSONL ingestion and subsampling.

mod corpus;
pub mod minilang;
mod vocab;

pub use corpus::{
    build_vocab, generate_minilang_corpus, load_jsonl, read_jsonl, subsample, subsample_size, write_jsonl, Corpus,
    CorpusManifest, Example, RawCorpus, RawExample, SplitSizes, TaskKind, TaskSpec, MANIFEST_FILE,
};
pub use minilang::Language;
pub use vocab::{Vocab, BOS, EOS, LABELS, PAD, RESERVED, UNK};
