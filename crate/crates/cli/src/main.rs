use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use transcoder::data::Corpus;
use transcoder::experiment::{
    build_base, load_base, verify_artifacts, write_text, ExperimentConfig, Lab, Layout, SuiteName, Workspace, REPORT_FILE,
    SNAPSHOT_FILE,
};
use transcoder::metrics::{evaluate, format_table};
use transcoder::model::{BackboneSnapshot, Checkpoint, PrefixBank};
use transcoder::training::{low_resource_run, specify_target, train_source, TrainReport, ABLATION_TAG};
use transcoder::{Error, Result};

#[derive(Parser)]
#[command(name = "transcoder", version, about = "Transferable prefix tuning experiments on toy code corpora")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (and ingest) the corpora and write the shared vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace an existing data directory.
        #[arg(long)]
        force: bool,
    },
    /// Build the base backbone snapshot every run starts from.
    PretrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Train a knowledge prefix on source tasks.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Comma-separated task ids; defaults to the cross-task preset.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// Fixed visit order as a comma-separated permutation of the tasks.
        #[arg(long, value_delimiter = ',')]
        order: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory name under `source/`.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Attach a prefix to a fresh backbone and tune on a target task.
    SpecifyTarget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// Prefix checkpoint produced by train-source.
        #[arg(long, conflicts_with_all = ["random_prefix", "no_prefix"])]
        prefix: Option<PathBuf>,
        /// Use a freshly initialized prefix instead of a learned one.
        #[arg(long, conflicts_with = "no_prefix")]
        random_prefix: bool,
        /// Tune the backbone alone.
        #[arg(long)]
        no_prefix: bool,
        /// Fraction of the train split to keep.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Score a backbone (and optional prefix) on a split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: String,
        /// Backbone snapshot; defaults to the base snapshot.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
        split: String,
        /// Score at most this many examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run a scripted experiment suite.
    Suite {
        /// cross-task, cross-language, ablation, order or low-resource.
        name: String,
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Check that every artifact carries the config's fingerprint.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", dir.display())));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Saves the partial report carried by an aborted run before passing the
/// error on.
fn keep_partial<T>(dir: &Path, r: Result<T>) -> Result<T> {
    if let Err(Error::Aborted { report, .. }) = &r {
        let path = dir.join("report.partial.json");
        if write_text(&path, report).is_ok() {
            eprintln!("partial report written to {}", path.display());
        }
    }
    r
}

fn save_prefix(prefix: &PrefixBank<f32>, path: &Path, fingerprint: &str) -> Result<()> {
    let mut ck = prefix.to_checkpoint();
    ck.config_fingerprint = Some(fingerprint.to_string());
    ck.save(path)
}

fn load_prefix(path: &Path, ws: &Workspace) -> Result<PrefixBank<f32>> {
    PrefixBank::from_checkpoint(&Checkpoint::load(path)?, &ws.model_config)
}

struct Env {
    cfg: ExperimentConfig,
    layout: Layout,
    fingerprint: String,
}

impl Env {
    fn new(common: &Common) -> Result<Self> {
        let cfg = ExperimentConfig::load(&common.config)?;
        let layout = Layout::new(cfg.output_dir.clone());
        let fingerprint = cfg.fingerprint();
        Ok(Self { cfg, layout, fingerprint })
    }

    fn workspace(&self) -> Result<Workspace> {
        Workspace::load(&self.cfg, &self.layout)
    }

    fn base(&self, ws: &Workspace) -> Result<BackboneSnapshot> {
        load_base(&self.layout, &ws.model_config)
    }

    fn stamp(&self, report: &mut TrainReport, base: &BackboneSnapshot) {
        report.seeds.insert("data".into(), self.cfg.data.seed);
        report.seeds.insert("base".into(), base.seed());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, force } => {
            let env = Env::new(&common)?;
            let ws = Workspace::generate(&env.cfg, &env.layout, force)?;
            for (id, c) in &ws.corpora {
                let s = c.sizes();
                println!("{id}: train {} dev {} test {}", s.train, s.dev, s.test);
            }
            println!("vocabulary: {} tokens", ws.vocab.len());
            println!("{}", env.layout.data_dir().display());
        }
        Command::PretrainBase { common, force } => {
            let env = Env::new(&common)?;
            let ws = env.workspace()?;
            let dir = env.layout.base_dir();
            fresh_dir(&dir, force)?;
            let (snapshot, mut report) = keep_partial(&dir, build_base(&env.cfg, &ws))?;
            report.seeds.insert("data".into(), env.cfg.data.seed);
            snapshot.save(&dir.join(SNAPSHOT_FILE))?;
            report.save(&dir.join(REPORT_FILE))?;
            if let (Some(first), Some(last)) = (report.steps.first(), report.steps.last()) {
                println!("denoising loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, report.steps.len());
            }
            println!("{}", dir.join(SNAPSHOT_FILE).display());
        }
        Command::TrainSource { common, tasks, order, seed, name, force } => {
            let env = Env::new(&common)?;
            let ws = env.workspace()?;
            let base = env.base(&ws)?;
            let tasks = if tasks.is_empty() { SuiteName::CrossTask.preset().sources } else { tasks };
            let seed = seed.unwrap_or(env.cfg.seeds[0]);
            let plan = env.cfg.source_plan((!order.is_empty()).then(|| order.clone()));
            let name = name.unwrap_or_else(|| {
                let shown = if order.is_empty() { &tasks } else { &order };
                format!("{}-seed{seed}", shown.join("+"))
            });
            let dir = env.layout.source_dir(&name);
            fresh_dir(&dir, force)?;
            let corpora: Vec<&Corpus> = ws.corpora_for(&tasks)?;
            let theta0 = PrefixBank::init(&ws.model_config, seed, env.cfg.model.encoder_shape())?;
            let (theta, mut report) =
                keep_partial(&dir, train_source(&corpora, &plan, theta0, &base, seed, &env.fingerprint))?;
            env.stamp(&mut report, &base);
            let path = dir.join("prefix.json");
            save_prefix(&theta, &path, &env.fingerprint)?;
            report.save(&dir.join(REPORT_FILE))?;
            println!("{}", path.display());
        }
        Command::SpecifyTarget { common, task, prefix, random_prefix, no_prefix, rate, seed, name, force } => {
            let env = Env::new(&common)?;
            let ws = env.workspace()?;
            let base = env.base(&ws)?;
            let target = ws.corpus(&task)?;
            let seed = seed.unwrap_or(env.cfg.seeds[0]);
            let (bank, arm) = match (&prefix, random_prefix, no_prefix) {
                (Some(p), _, _) => (Some(load_prefix(p, &ws)?), "transfer"),
                (None, true, _) => {
                    (Some(PrefixBank::init(&ws.model_config, seed, env.cfg.model.encoder_shape())?), "random")
                }
                (None, false, true) => (None, "fine-tune"),
                (None, false, false) => {
                    return Err(Error::Config("choose one of --prefix, --random-prefix or --no-prefix".into()))
                }
            };
            let name = name.unwrap_or_else(|| match rate {
                Some(r) => format!("{task}-{arm}-rate{r}-seed{seed}"),
                None => format!("{task}-{arm}-seed{seed}"),
            });
            let dir = env.layout.target_dir(&name);
            fresh_dir(&dir, force)?;
            let plan = env.cfg.target_plan();
            let result = match rate {
                Some(r) => low_resource_run(target, r, bank, &base, &plan, seed, &env.fingerprint),
                None => specify_target(target, bank, &base, &plan, seed, &env.fingerprint),
            };
            let mut out = keep_partial(&dir, result)?;
            if random_prefix {
                out.report.tags.push(ABLATION_TAG.into());
            }
            env.stamp(&mut out.report, &base);
            let mut snapshot = out.backbone.snapshot();
            snapshot.set_config_fingerprint(Some(env.fingerprint.clone()));
            snapshot.save(&dir.join("backbone.json"))?;
            if let Some(p) = &out.prefix {
                save_prefix(p, &dir.join("prefix.json"), &env.fingerprint)?;
            }
            let path = dir.join(REPORT_FILE);
            out.report.save(&path)?;
            println!("best dev {} {:.4} (epoch {})", out.metric.as_str(), out.best_dev, out.report.best_epoch.unwrap_or(0));
            for e in &out.report.evals {
                println!("test {} {:.4} over {} examples", e.metric.as_str(), e.value, e.n_examples);
            }
            println!("{}", path.display());
        }
        Command::Evaluate { common, task, backbone, prefix, split, limit } => {
            let env = Env::new(&common)?;
            let ws = env.workspace()?;
            let corpus = ws.corpus(&task)?;
            let snapshot = match &backbone {
                Some(p) => BackboneSnapshot::load(p)?,
                None => env.base(&ws)?,
            };
            let model = snapshot.restore::<f32>(&ws.model_config)?;
            let bank = prefix.as_deref().map(|p| load_prefix(p, &ws)).transpose()?;
            let examples = match split.as_str() {
                "train" => &corpus.train,
                "dev" => &corpus.dev,
                _ => &corpus.test,
            };
            let examples = &examples[..limit.unwrap_or(examples.len()).min(examples.len())];
            let result = evaluate(&model, bank.as_ref(), &corpus.spec, examples, 64)?;
            print!("{}", format_table(&[(split.clone(), result)]));
        }
        Command::Suite { name, common, seeds, force } => {
            let env = Env::new(&common)?;
            let suite = SuiteName::parse(&name)?;
            let ws = env.workspace()?;
            let base = env.base(&ws)?;
            let seeds = if seeds.is_empty() { env.cfg.seeds.clone() } else { seeds };
            let root = env.layout.root.join("suites");
            fresh_dir(&root.join(suite.as_str()), force)?;
            let mut lab = Lab::new(&env.cfg, &ws, &base, Some(root.clone()));
            let summary = keep_partial(&root.join(suite.as_str()), lab.run(suite, &seeds))?;
            print!("{}", summary.format());
            println!("{}", root.join(suite.as_str()).join("summary.json").display());
        }
        Command::Verify { common } => {
            let env = Env::new(&common)?;
            let outcome = verify_artifacts(&env.layout, &env.fingerprint)?;
            for (path, problem) in &outcome.problems {
                println!("FAIL {}: {problem}", path.display());
            }
            println!("{} artifacts checked, {} problems", outcome.checked.len(), outcome.problems.len());
            if !outcome.ok() {
                return Err(Error::Data("artifact verification failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    info!("transcoder {}", env!("CARGO_PKG_VERSION"));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
