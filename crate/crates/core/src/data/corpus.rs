use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

use super::minilang::{generate_program, plant_defect, Language};
use super::vocab::{Vocab, LABELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Summarization,
    Translation,
    Classification,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summarization" | "sum" => Ok(TaskKind::Summarization),
            "translation" | "trans" => Ok(TaskKind::Translation),
            "classification" | "cls" => Ok(TaskKind::Classification),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Summarization => "summarization",
            TaskKind::Translation => "translation",
            TaskKind::Classification => "classification",
        }
    }

    /// Short form used in experiment tags such as `CLS2Sum`.
    pub fn abbrev(&self) -> &'static str {
        match self {
            TaskKind::Summarization => "Sum",
            TaskKind::Translation => "Trans",
            TaskKind::Classification => "CLS",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub source_language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, kind: TaskKind, source_language: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            kind,
            source_language: source_language.into(),
            target_language: None,
            dataset_path: None,
        }
    }

    /// Spec for a generated mini-language corpus, e.g. `alpha-summarization`.
    pub fn minilang(language: Language, kind: TaskKind) -> Self {
        let mut spec = Self::new(format!("{language}-{kind}"), kind, language.tag());
        if kind == TaskKind::Translation {
            spec.target_language = Some(language.other().tag().to_string());
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::Config("task_id must be non-empty".into()));
        }
        if self.kind == TaskKind::Translation && self.target_language.is_none() {
            return Err(Error::Config(format!("translation task {} needs a target_language", self.task_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub source: String,
    pub target: String,
}

/// A generated or ingested corpus before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCorpus {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub raw_source: String,
    pub raw_target: String,
}

impl Example {
    pub fn encode(raw: &RawExample, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            source_tokens: vocab.encode_source(&raw.source)?,
            target_tokens: vocab.encode_target(&raw.target),
            raw_source: raw.source.clone(),
            raw_target: raw.target.clone(),
        })
    }
}

/// Tokenized corpus, immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub spec: TaskSpec,
    pub seed: u64,
    /// Checksum of the vocab the token ids refer to.
    pub vocab_checksum: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl RawCorpus {
    pub fn splits(&self) -> [(&'static str, &[RawExample]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<Corpus> {
        let enc = |xs: &[RawExample]| xs.iter().map(|x| Example::encode(x, vocab)).collect::<Result<Vec<_>>>();
        let corpus = Corpus {
            spec: self.spec.clone(),
            seed: self.seed,
            vocab_checksum: vocab.checksum(),
            train: enc(&self.train)?,
            dev: enc(&self.dev)?,
            test: enc(&self.test)?,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.train.is_empty() {
            return Err(Error::Data(format!("corpus {} has an empty train split", self.spec.task_id)));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for split in [&self.train, &self.dev, &self.test] {
            let mut here: HashSet<&str> = HashSet::new();
            for ex in split.iter() {
                if seen.contains(ex.raw_source.as_str()) {
                    return Err(Error::Data(format!("source {:?} appears in more than one split", ex.raw_source)));
                }
                here.insert(&ex.raw_source);
            }
            seen.extend(here);
        }
        Ok(())
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { train: self.train.len(), dev: self.dev.len(), test: self.test.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Generates a mini-language corpus. Sources are distinct across all
/// splits. Classification labels alternate `buggy`, `clean`, ... in
/// generation order.
pub fn generate_minilang_corpus(
    language: Language,
    kind: TaskKind,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    seed: u64,
) -> Result<RawCorpus> {
    if n_train == 0 || n_dev == 0 || n_test == 0 {
        return Err(Error::Config("corpus split sizes must be >= 1".into()));
    }
    let mut rng = stream(seed, &format!("corpus/{language}/{kind}"));
    let total = n_train + n_dev + n_test;
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while examples.len() < total {
        attempts += 1;
        if attempts > 50 * total + 1000 {
            return Err(Error::Config(format!("could not generate {total} distinct programs")));
        }
        let clean = generate_program(&mut rng);
        let (program, target) = match kind {
            TaskKind::Summarization => (clean.clone(), clean.summarize()),
            TaskKind::Translation => (clean.clone(), clean.render(language.other())),
            TaskKind::Classification => {
                if examples.len() % 2 == 0 {
                    (plant_defect(&mut rng, &clean), LABELS[0].to_string())
                } else {
                    (clean, LABELS[1].to_string())
                }
            }
        };
        let source = program.render(language);
        if seen.insert(source.clone()) {
            examples.push(RawExample { source, target });
        }
    }
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    Ok(RawCorpus { spec: TaskSpec::minilang(language, kind), seed, train: examples, dev, test })
}

/// Vocabulary over every whitespace token in the given corpora.
pub fn build_vocab(corpora: &[&RawCorpus]) -> Result<Vocab> {
    if corpora.is_empty() {
        return Err(Error::Config("build_vocab needs at least one corpus".into()));
    }
    let words = corpora
        .iter()
        .flat_map(|c| c.train.iter().chain(&c.dev).chain(&c.test))
        .flat_map(|x| x.source.split_whitespace().chain(x.target.split_whitespace()));
    Ok(Vocab::from_words(words))
}

#[derive(Deserialize)]
struct JsonlLine {
    source: Option<String>,
    target: Option<String>,
    label: Option<String>,
}

/// Reads one split from a JSONL file of `{"source", "target"}` objects.
/// A `label` field stands in for `target`. Blank lines are skipped; CR
/// line endings are normalized away. Every malformed line is reported.
pub fn read_jsonl(path: &Path) -> Result<Vec<RawExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        match serde_json::from_str::<JsonlLine>(line) {
            Err(e) => bad.push((lineno, format!("invalid JSON object: {e}"))),
            Ok(JsonlLine { source, target, label }) => match (source, target.or(label)) {
                (Some(source), Some(target)) => out.push(RawExample { source, target }),
                (None, _) => bad.push((lineno, "missing \"source\"".into())),
                (_, None) => bad.push((lineno, "missing \"target\"".into())),
            },
        }
    }
    if !bad.is_empty() {
        return Err(Error::Ingestion { path: path.to_path_buf(), lines: bad });
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut s = String::new();
    for x in examples {
        s.push_str(&serde_json::to_string(x)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Loads a single JSONL file as the train split of an encoded corpus.
pub fn load_jsonl(path: &Path, vocab: &Vocab, task: TaskSpec) -> Result<Corpus> {
    let train = read_jsonl(path)?;
    let raw = RawCorpus { spec: task, seed: 0, train, dev: Vec::new(), test: Vec::new() };
    raw.encode(vocab)
}

/// Keeps `⌈rate·|train|⌉` uniformly chosen training examples, in their
/// original order. Dev and test are untouched.
pub fn subsample(corpus: &Corpus, rate: f64, seed: u64) -> Result<Corpus> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("subsample rate {rate} outside (0, 1]")));
    }
    let n = corpus.train.len();
    let k = subsample_size(n, rate);
    let mut out = corpus.clone();
    if k == n {
        return Ok(out);
    }
    let mut rng = stream(seed, &format!("subsample/{}", corpus.spec.task_id));
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    out.train = idx.into_iter().map(|i| corpus.train[i].clone()).collect();
    Ok(out)
}

/// `⌈rate·n⌉`, immune to products such as `0.1 * 1000 = 100.00000000000001`.
pub fn subsample_size(n: usize, rate: f64) -> usize {
    let exact = rate * n as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    k.clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub task: TaskSpec,
    pub sizes: SplitSizes,
    pub seed: u64,
    pub vocab_checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RawCorpus {
    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and the manifest.
    pub fn save_dir(&self, dir: &Path, vocab: &Vocab, fingerprint: Option<String>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, xs) in self.splits() {
            write_jsonl(&dir.join(format!("{name}.jsonl")), xs)?;
        }
        let manifest = CorpusManifest {
            task: self.spec.clone(),
            sizes: SplitSizes { train: self.train.len(), dev: self.dev.len(), test: self.test.len() },
            seed: self.seed,
            vocab_checksum: vocab.checksum(),
            config_fingerprint: fingerprint,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<(Self, CorpusManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        let raw = RawCorpus {
            spec: manifest.task.clone(),
            seed: manifest.seed,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            dev: read_jsonl(&dir.join("dev.jsonl"))?,
            test: read_jsonl(&dir.join("test.jsonl"))?,
        };
        let got = SplitSizes { train: raw.train.len(), dev: raw.dev.len(), test: raw.test.len() };
        if got != manifest.sizes {
            return Err(Error::Data(format!("{}: split sizes {got:?} disagree with manifest {:?}", dir.display(), manifest.sizes)));
        }
        Ok((raw, manifest))
    }
}
