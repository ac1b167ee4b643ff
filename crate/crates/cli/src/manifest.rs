use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use hypersyn::datasets::{file_digest, DataPaths};
use hypersyn::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub data: BTreeMap<String, FileDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_digest: Option<String>,
    pub seed: u64,
    pub git_describe: String,
    pub started: String,
    pub finished: String,
    /// Output file name (relative to the manifest) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config: None,
            data: BTreeMap::new(),
            data_digest: None,
            seed,
            git_describe: git_describe(),
            started: now(),
            finished: String::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_data(&mut self, paths: &DataPaths) -> Result<()> {
        for (name, path) in paths.files() {
            let entry = FileDigest {
                path: std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()),
                sha256: file_digest(path)?,
            };
            self.data.insert(name.into(), entry);
        }
        Ok(())
    }

    /// Digests every listed output under `dir` and writes the manifest there.
    pub fn finish(mut self, dir: &Path, outputs: &[String]) -> Result<()> {
        for name in outputs {
            self.outputs.insert(name.clone(), file_digest(&dir.join(name))?);
        }
        self.finished = now();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes every recorded digest. Returns the number of files checked.
    pub fn verify(&self, dir: &Path) -> Result<usize> {
        let mut checked = 0;
        let data = self.data.values().map(|d| (d.path.clone(), &d.sha256));
        let outputs = self.outputs.iter().map(|(name, sha)| (dir.join(name), sha));
        for (path, want) in data.chain(outputs) {
            let got = file_digest(&path)?;
            if &got != want {
                return Err(Error::Integrity(format!(
                    "{} has digest {got}, manifest records {want}",
                    path.display()
                )));
            }
            checked += 1;
        }
        Ok(checked)
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
