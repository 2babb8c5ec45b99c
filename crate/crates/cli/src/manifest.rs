use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub sha256: String,
    pub bytes: usize,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
}

/// Index of everything written to an output directory. Subcommands merge
/// into the existing manifest, replacing entries for files they rewrite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, Entry>,
    /// Per-command summaries (counts, accuracies).
    pub runs: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(path.display(), e))?;
        serde_json::from_str(&text).map_err(|e| CliError::MissingInput(format!("corrupt manifest {}: {e}", path.display())))
    }
}

/// Writer for one subcommand's outputs.
pub struct Output {
    dir: PathBuf,
    command: String,
    seed: u64,
    config_hash: String,
    manifest: Manifest,
}

impl Output {
    pub fn open(cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let dir = cfg.run.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))?;
        let manifest = Manifest::load(&dir)?;
        Ok(Self { dir, command: command.to_string(), seed: cfg.run.seed, config_hash: cfg.hash(), manifest })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
        self.manifest.files.insert(
            name.to_string(),
            Entry {
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len(),
                command: self.command.clone(),
                seed: self.seed,
                config_sha256: self.config_hash.clone(),
            },
        );
        Ok(())
    }

    pub fn summary(&mut self, key: &str, value: serde_json::Value) {
        self.manifest.runs.insert(key.to_string(), value);
    }

    pub fn finish(self) -> Result<Manifest, CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
        Ok(self.manifest)
    }
}
