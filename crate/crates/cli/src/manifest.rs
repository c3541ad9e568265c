//! Run directories and their checksummed manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(format!("read {}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(CliError::io(format!("write {}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(CliError::io(format!("rename to {}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Every listed output exists under `dir` with a matching checksum.
    pub fn verify(&self, dir: &Path) -> Result<(), String> {
        for f in &self.outputs {
            let p = dir.join(&f.path);
            let bytes = fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(format!("{}: checksum mismatch", f.path));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(|_| CliError::MissingArtifact(p.display().to_string()))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    }
}

/// An output directory being filled by one command.
pub struct RunDir {
    pub root: PathBuf,
    command: String,
    config: RunConfig,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
    timings: BTreeMap<String, f64>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(CliError::io(format!("create {}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Write `rel` (relative to the run root) and list it in the manifest.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(format!("create {}", parent.display())))?;
        }
        write_atomic(&path, bytes)?;
        self.outputs.retain(|f| f.path != rel);
        self.outputs.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    /// List a file some other writer already placed under the root.
    pub fn adopt(&mut self, rel: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.root.join(rel)).map_err(CliError::io(format!("read {rel}")))?;
        self.outputs.retain(|f| f.path != rel);
        self.outputs.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn time<R>(&mut self, phase: &str, f: impl FnOnce() -> R) -> R {
        let t0 = Instant::now();
        let out = f();
        *self.timings.entry(phase.to_string()).or_default() += t0.elapsed().as_secs_f64();
        out
    }

    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            timings: self.timings,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_atomic(&self.root.join(MANIFEST), text.as_bytes())?;
        Ok(m)
    }
}
