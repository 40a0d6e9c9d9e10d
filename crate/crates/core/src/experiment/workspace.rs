//! On-disk layout of an experiment directory.
//!
//! ```text
//! <output_dir>/data/vocab.json
//! <output_dir>/data/<task_id>/{train,dev,test}.jsonl, manifest.json
//! <output_dir>/base/snapshot.json, report.json
//! <output_dir>/source/<run>/prefix.json, report.json
//! <output_dir>/target/<run>/backbone.json, prefix.json, report.json
//! <output_dir>/suites/<suite>/summary.{json,txt,csv}, runs/*.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{
    build_vocab, generate_minilang_corpus, read_jsonl, Corpus, CorpusManifest, Language, RawCorpus, TaskKind, TaskSpec,
    Vocab,
};
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneSnapshot, ModelConfig, Provenance};
use crate::training::{pretrain_base, TrainReport};

use super::config::ExperimentConfig;

pub const VOCAB_FILE: &str = "vocab.json";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir().join(VOCAB_FILE)
    }

    pub fn corpus_dir(&self, task_id: &str) -> PathBuf {
        self.data_dir().join(task_id)
    }

    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.base_dir().join(SNAPSHOT_FILE)
    }

    pub fn source_dir(&self, run: &str) -> PathBuf {
        self.root.join("source").join(run)
    }

    pub fn target_dir(&self, run: &str) -> PathBuf {
        self.root.join("target").join(run)
    }

    pub fn suite_dir(&self, suite: &str) -> PathBuf {
        self.root.join("suites").join(suite)
    }
}

/// Task specs the config asks for, generated ones first.
pub fn task_specs(cfg: &ExperimentConfig) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    if cfg.data.generate {
        for lang in [Language::Alpha, Language::Beta] {
            for kind in [TaskKind::Summarization, TaskKind::Translation, TaskKind::Classification] {
                out.push(TaskSpec::minilang(lang, kind));
            }
        }
    }
    for d in &cfg.data.jsonl {
        let mut spec = TaskSpec::new(d.task_id.clone(), d.kind, d.source_language.clone());
        spec.target_language = d.target_language.clone();
        spec.dataset_path = Some(d.dir.clone());
        out.push(spec);
    }
    out
}

fn train_size(cfg: &ExperimentConfig, spec: &TaskSpec, lang: Language) -> usize {
    cfg.data.train_overrides.get(&spec.task_id).copied().unwrap_or(match lang {
        Language::Alpha => cfg.data.alpha_train,
        Language::Beta => cfg.data.beta_train,
    })
}

/// Builds every raw corpus named by the config: generated corpora plus the
/// JSONL datasets read from their directories.
pub fn build_raw_corpora(cfg: &ExperimentConfig) -> Result<Vec<RawCorpus>> {
    let mut out = Vec::new();
    let mut jsonl = cfg.data.jsonl.iter();
    for spec in task_specs(cfg) {
        if spec.dataset_path.is_none() {
            let lang = Language::parse(&spec.source_language)?;
            out.push(generate_minilang_corpus(
                lang,
                spec.kind,
                train_size(cfg, &spec, lang),
                cfg.data.dev,
                cfg.data.test,
                cfg.data.seed,
            )?);
        } else {
            let d = jsonl.next().expect("one spec per jsonl dataset");
            spec.validate()?;
            out.push(RawCorpus {
                spec,
                seed: cfg.data.seed,
                train: read_jsonl(&d.dir.join("train.jsonl"))?,
                dev: read_jsonl(&d.dir.join("dev.jsonl"))?,
                test: read_jsonl(&d.dir.join("test.jsonl"))?,
            });
        }
    }
    let mut ids = std::collections::HashSet::new();
    for c in &out {
        if !ids.insert(c.spec.task_id.clone()) {
            return Err(Error::Config(format!("task id {:?} defined twice", c.spec.task_id)));
        }
    }
    Ok(out)
}

/// Tokenized corpora sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub vocab: Vocab,
    pub corpora: BTreeMap<String, Corpus>,
    pub model_config: ModelConfig,
}

impl Workspace {
    /// Builds everything in memory without touching disk.
    pub fn in_memory(cfg: &ExperimentConfig) -> Result<Self> {
        let raw = build_raw_corpora(cfg)?;
        Self::from_raw(cfg, &raw)
    }

    fn from_raw(cfg: &ExperimentConfig, raw: &[RawCorpus]) -> Result<Self> {
        let refs: Vec<&RawCorpus> = raw.iter().collect();
        let vocab = build_vocab(&refs)?;
        Self::encode(cfg, vocab, raw)
    }

    fn encode(cfg: &ExperimentConfig, vocab: Vocab, raw: &[RawCorpus]) -> Result<Self> {
        let corpora = raw
            .iter()
            .map(|r| Ok((r.spec.task_id.clone(), r.encode(&vocab)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let model_config = cfg.model.model_config(vocab.len())?;
        Ok(Self { vocab, corpora, model_config })
    }

    /// Writes corpora and vocab under `layout`. Refuses to overwrite an
    /// existing data directory unless `force` is set.
    pub fn generate(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<Self> {
        let dir = layout.data_dir();
        if dir.exists() {
            if !force {
                return Err(Error::Config(format!("{} already exists; pass --force to regenerate", dir.display())));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let raw = build_raw_corpora(cfg)?;
        let ws = Self::from_raw(cfg, &raw)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let vp = layout.vocab_path();
        std::fs::write(&vp, ws.vocab.to_json()).map_err(|e| Error::io(&vp, e))?;
        let fp = cfg.fingerprint();
        for r in &raw {
            r.save_dir(&layout.corpus_dir(&r.spec.task_id), &ws.vocab, Some(fp.clone()))?;
        }
        Ok(ws)
    }

    /// Loads the corpora the config names from `layout`.
    pub fn load(cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let vp = layout.vocab_path();
        let text = std::fs::read_to_string(&vp)
            .map_err(|e| Error::Data(format!("cannot read {} ({e}); run gen-data first", vp.display())))?;
        let vocab = Vocab::from_json(&text)?;
        let mut raw = Vec::new();
        for spec in task_specs(cfg) {
            let (r, manifest) = RawCorpus::load_dir(&layout.corpus_dir(&spec.task_id))?;
            check_manifest(&manifest, &vocab)?;
            raw.push(r);
        }
        Self::encode(cfg, vocab, &raw)
    }

    pub fn corpus(&self, task_id: &str) -> Result<&Corpus> {
        self.corpora.get(task_id).ok_or_else(|| {
            Error::Config(format!(
                "unknown task {task_id:?}; known: {}",
                self.corpora.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn corpora_for(&self, ids: &[String]) -> Result<Vec<&Corpus>> {
        ids.iter().map(|id| self.corpus(id)).collect()
    }
}

fn check_manifest(manifest: &CorpusManifest, vocab: &Vocab) -> Result<()> {
    if manifest.vocab_checksum != vocab.checksum() {
        return Err(Error::Data(format!(
            "corpus {} was built with a different vocabulary",
            manifest.task.task_id
        )));
    }
    Ok(())
}

/// Base backbone for every run: the denoising pass when `pretrain.steps`
/// is positive, otherwise a random initialization.
pub fn build_base(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(BackboneSnapshot, TrainReport)> {
    let fp = cfg.fingerprint();
    let (backbone, mut report) = if cfg.pretrain.steps > 0 {
        let corpora: Vec<&Corpus> = ws.corpora.values().collect();
        pretrain_base(&corpora, &ws.model_config, &cfg.pretrain_plan(), cfg.pretrain.seed, &fp)?
    } else {
        let mut b = Backbone::<f32>::init(&ws.model_config, cfg.pretrain.seed)?;
        b.set_provenance(Provenance::RandomInit);
        let mut r = TrainReport::new(fp.as_str());
        r.seeds.insert("run".into(), cfg.pretrain.seed);
        r.tags.push("random-base".into());
        (b, r)
    };
    let mut snapshot = backbone.snapshot();
    snapshot.set_config_fingerprint(Some(fp));
    report.base_hash = Some(backbone.content_hash());
    Ok((snapshot, report))
}

pub fn load_base(layout: &Layout, config: &ModelConfig) -> Result<BackboneSnapshot> {
    let path = layout.snapshot_path();
    if !path.exists() {
        return Err(Error::Data(format!("{} not found; run pretrain-base first", path.display())));
    }
    let snapshot = BackboneSnapshot::load(&path)?;
    if !snapshot.config().backbone_compatible(config) {
        return Err(Error::Compatibility(format!("{} does not match the configured model", path.display())));
    }
    Ok(snapshot)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
