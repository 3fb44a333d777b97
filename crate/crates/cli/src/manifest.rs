//! Run manifests written next to every output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    /// Input path to SHA-256. Directories hash their sorted file listing and
    /// contents.
    pub inputs: BTreeMap<String, String>,
    pub output: String,
    pub output_sha256: String,
    pub started_at: String,
    pub finished_at: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_dir(root: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().into_owned();
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update(sha256_file(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

pub fn digest_input(path: &Path) -> Result<String> {
    if path.is_dir() {
        sha256_dir(path)
    } else {
        sha256_file(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub struct Recorder {
    argv: Vec<String>,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    started_at: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Recorder {
    pub fn start<C: Serialize>(config: &C, inputs: &[&Path]) -> Result<Self> {
        Ok(Recorder {
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            started_at: now(),
        })
    }

    /// Writes `<output>.manifest.json` for a finished output file.
    pub fn finish(&self, output: &Path) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), digest_input(p)?);
        }
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: self.argv.clone(),
            config: self.config.clone(),
            inputs,
            output: output.display().to_string(),
            output_sha256: sha256_file(output)?,
            started_at: self.started_at.clone(),
            finished_at: now(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        let path = manifest_path(output);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
