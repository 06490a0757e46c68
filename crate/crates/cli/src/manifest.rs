//! Run manifests. All output files of a run go through one [`RunWriter`], which hashes
//! each file and rewrites `manifest.json` after every addition.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    pub config: String,
    pub outputs: Vec<OutputEntry>,
    pub summary: serde_json::Map<String, Value>,
    pub assertions: Vec<Assertion>,
    pub exit_code: i32,
    pub message: Option<String>,
    pub timings: Timings,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

pub struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl RunWriter {
    pub fn create(
        dir: PathBuf,
        subcommand: &str,
        config_hash: u64,
        seed: u64,
        samples: usize,
        config: String,
    ) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let w = Self {
            dir,
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                subcommand: subcommand.into(),
                config_hash: format!("{config_hash:016x}"),
                seed,
                samples,
                config,
                outputs: Vec::new(),
                summary: serde_json::Map::new(),
                assertions: Vec::new(),
                exit_code: 0,
                message: None,
                timings: Timings {
                    started_unix: started,
                    wall_seconds: 0.0,
                },
            },
            start: Instant::now(),
        };
        w.flush()?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write `name` inside the run directory and record its hash.
    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.outputs.retain(|o| o.path != name);
        self.manifest.outputs.push(OutputEntry {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        self.flush()
    }

    pub fn summary(&mut self, key: &str, value: impl Into<Value>) {
        self.manifest.summary.insert(key.into(), value.into());
    }

    pub fn assertion(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.manifest.assertions.push(Assertion {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn finish(mut self, outcome: &Result<(), CliError>) -> Result<RunManifest, CliError> {
        if let Err(e) = outcome {
            self.manifest.exit_code = e.exit_code();
            self.manifest.message = Some(e.to_string());
        }
        self.manifest.timings.wall_seconds = self.start.elapsed().as_secs_f64();
        self.flush()?;
        Ok(self.manifest)
    }

    fn flush(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }
}

/// Float for JSON; non-finite values become strings.
pub fn json_num(x: f64) -> Value {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .unwrap_or_else(|| Value::String(format!("{x}")))
}
