use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
seeds = [0]
output_dir = "runs"

[model]
d_model = 16
d_ff = 32
n_heads = 2
n_encoder_layers = 1
n_decoder_layers = 1
prefix_length = 4

[data]
alpha_train = 40
beta_train = 30
dev = 8
test = 8

[pretrain]
steps = 3

[source]
epochs = 1
batches_per_epoch = 4
batch_size = 4

[target]
epochs = 1
batch_size = 8
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self { dir: tempfile::tempdir().unwrap() };
        s.write_config("exp.toml", CONFIG);
        s
    }

    fn write_config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn runs(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run_with(&self, config: &str, args: &[&str]) -> Output {
        let cfg = self.dir.path().join(config);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_transcoder"));
        cmd.args(args).arg("-c").arg(cfg).current_dir(self.dir.path());
        cmd.output().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with("exp.toml", args)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn prepared() -> Self {
        let s = Self::new();
        s.ok(&["gen-data"]);
        s.ok(&["pretrain-base"]);
        s
    }
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn last_line(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.trim_end().lines().last().unwrap())
}

#[test]
fn gen_data_writes_six_corpora_and_refuses_to_overwrite() {
    let s = Sandbox::new();
    s.ok(&["gen-data"]);
    let dirs = std::fs::read_dir(s.runs().join("data")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 6);
    assert!(s.runs().join("data/vocab.json").exists());
    assert_eq!(s.run(&["gen-data"]).status.code(), Some(2));
    s.ok(&["gen-data", "--force"]);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let s = Sandbox::new();
    s.write_config("bad.toml", &CONFIG.replace("[pretrain]", "[pretrain]\nwarmup = 3"));
    let out = s.run_with("bad.toml", &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));
}

#[test]
fn missing_data_is_a_data_error() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["pretrain-base"]).status.code(), Some(3));
}

#[test]
fn source_and_target_runs_record_their_settings() {
    let s = Sandbox::prepared();
    let base = read(s.runs().join("base/report.json"));
    assert!(base.contains("config_fingerprint"));

    let out = s.ok(&["train-source", "--order", "alpha-classification,alpha-summarization", "--name", "rev"]);
    let prefix = last_line(&out);
    assert!(prefix.exists());
    let report = read(s.runs().join("source/rev/report.json"));
    assert!(report.contains("\"task_order\": [\n    \"alpha-classification\",\n    \"alpha-summarization\""), "{report}");

    let bad_order = s.run(&["train-source", "--order", "alpha-classification", "--name", "x"]);
    assert_eq!(bad_order.status.code(), Some(2));

    let prefix_arg = prefix.to_str().unwrap();
    let out = s.ok(&["specify-target", "--task", "beta-classification", "--prefix", prefix_arg, "--rate", "0.1"]);
    let report_path = last_line(&out);
    assert!(report_path.ends_with("report.json"));
    let report = read(&report_path);
    assert!(report.contains("\"rate\": 0.1"), "{report}");
    assert!(report_path.parent().unwrap().join("backbone.json").exists());

    let table = s.ok(&["evaluate", "--task", "beta-classification", "--split", "dev", "--limit", "4"]);
    assert!(table.contains("beta-classification"));

    s.write_config("long.toml", &CONFIG.replace("prefix_length = 4", "prefix_length = 6"));
    let out = s.run_with("long.toml", &["specify-target", "--task", "beta-classification", "--prefix", prefix_arg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("prefix length 4") && err.contains("6 expected"), "{err}");
}

#[test]
fn suites_are_reproducible_and_verified() {
    let s = Sandbox::prepared();
    s.ok(&["suite", "ablation"]);
    let summary = s.runs().join("suites/ablation/summary.json");
    let first = read(&summary);
    assert!(s.runs().join("suites/ablation/summary.csv").exists());
    assert_eq!(s.run(&["suite", "ablation"]).status.code(), Some(2));
    s.ok(&["suite", "ablation", "--force"]);
    assert_eq!(read(&summary), first);

    let out = s.ok(&["suite", "order", "--seeds", "0,1"]);
    assert!(out.contains("spread"));
    assert_eq!(s.run(&["suite", "nonsense"]).status.code(), Some(2));

    let verified = s.ok(&["verify"]);
    assert!(verified.contains(", 0 problems"), "{verified}");

    let fingerprint = first.lines().find(|l| l.contains("config_fingerprint")).unwrap().split('"').nth(3).unwrap().to_string();
    std::fs::write(&summary, first.replace(&fingerprint, "deadbeef")).unwrap();
    let out = s.run(&["verify"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
