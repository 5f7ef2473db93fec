//! Run manifests: every output directory carries a `manifest.json` with
//! content hashes of the inputs consumed and the files emitted, so any
//! artifact is reproducible from (config, seed) alone and staleness is
//! detectable by re-hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::{CliError, CliResult};

/// Version of the manifest layout and of every documented artifact schema.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Hash of the effective subcommand config (file bytes, or the
    /// serialized default when no --config was given).
    pub config_sha256: Option<String>,
    pub checkpoint_sha256: Option<String>,
    /// Combined hash over the dataset files that were read.
    pub dataset_sha256: Option<String>,
    /// Relative output path -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock of the run; the only field that differs between two
    /// otherwise identical runs.
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Order-sensitive combined hash over named byte blobs (length-prefixed so
/// the framing is unambiguous).
pub fn combined_hash(parts: &[(&str, &[u8])]) -> String {
    let mut hasher = Sha256::new();
    for (name, bytes) in parts {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Output-directory writer: records a content hash for every emitted file
/// and finishes by writing the manifest itself.
pub struct Emitter {
    dir: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl Emitter {
    pub fn new(subcommand: &str, dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Input(format!("cannot create output directory {}: {e}", dir.display()))
        })?;
        Ok(Emitter {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                schema_version: SCHEMA_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                subcommand: subcommand.to_string(),
                seed: None,
                config_sha256: None,
                checkpoint_sha256: None,
                dataset_sha256: None,
                outputs: BTreeMap::new(),
                wall_clock_seconds: 0.0,
            },
        })
    }

    pub fn set_seed(&mut self, seed: Option<u64>) {
        self.manifest.seed = seed;
    }

    pub fn set_config_bytes(&mut self, bytes: &[u8]) {
        self.manifest.config_sha256 = Some(sha256_hex(bytes));
    }

    pub fn set_checkpoint_hash(&mut self, hash: String) {
        self.manifest.checkpoint_sha256 = Some(hash);
    }

    pub fn set_dataset_hash(&mut self, hash: String) {
        self.manifest.dataset_sha256 = Some(hash);
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::Internal(format!("cannot serialize {name}: {e}")))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Record externally produced files (relative to the output directory)
    /// in the manifest, e.g. after a composite pipeline run.
    pub fn record_output(&mut self, name: &str, hash: String) {
        self.manifest.outputs.insert(name.to_string(), hash);
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| CliError::Internal(format!("cannot serialize manifest: {e}")))?;
        bytes.push(b'\n');
        fs::write(&path, bytes)
            .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
    }
}
