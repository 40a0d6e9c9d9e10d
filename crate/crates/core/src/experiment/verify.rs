use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::data::{Vocab, MANIFEST_FILE};
use crate::error::{Error, Result};

use super::workspace::{Layout, VOCAB_FILE};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyOutcome {
    pub checked: Vec<PathBuf>,
    pub problems: Vec<(PathBuf, String)>,
}

impl VerifyOutcome {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

fn json_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            json_files(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    Ok(())
}

fn has_seed(v: &Value) -> bool {
    v.get("seed").is_some_and(Value::is_u64)
        || v.get("seeds").is_some_and(|s| s.as_object().is_some_and(|m| !m.is_empty()) || s.as_array().is_some_and(|a| !a.is_empty()))
}

/// Checks that every JSON artifact under `layout` carries `fingerprint`
/// and the seeds that produced it, and that corpus manifests agree with
/// the stored vocabulary.
pub fn verify_artifacts(layout: &Layout, fingerprint: &str) -> Result<VerifyOutcome> {
    if !layout.root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", layout.root.display())));
    }
    let mut files = Vec::new();
    json_files(&layout.root, &mut files)?;
    let vocab_checksum = match std::fs::read_to_string(layout.vocab_path()) {
        Ok(text) => Some(Vocab::from_json(&text)?.checksum()),
        Err(_) => None,
    };
    let mut out = VerifyOutcome::default();
    for path in files {
        if path.file_name().is_some_and(|n| n == VOCAB_FILE) {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                out.problems.push((path, format!("not valid JSON: {e}")));
                continue;
            }
        };
        match value.get("config_fingerprint").and_then(Value::as_str) {
            None => out.problems.push((path.clone(), "no config_fingerprint".into())),
            Some(fp) if fp != fingerprint => {
                out.problems.push((path.clone(), format!("fingerprint {fp} differs from the config's {fingerprint}")))
            }
            Some(_) => {}
        }
        if !has_seed(&value) {
            out.problems.push((path.clone(), "no seed recorded".into()));
        }
        if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            let recorded = value.get("vocab_checksum").and_then(Value::as_str);
            match (&vocab_checksum, recorded) {
                (Some(v), Some(r)) if v == r => {}
                (None, _) => out.problems.push((path.clone(), "no vocab.json to check against".into())),
                _ => out.problems.push((path.clone(), "vocab checksum does not match vocab.json".into())),
            }
        }
        out.checked.push(path);
    }
    Ok(out)
}
