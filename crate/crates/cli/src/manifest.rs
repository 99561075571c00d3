use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use weaksep_core::config::RunConfig;
use weaksep_core::{Error, Result};

/// File name of the manifest written into every output directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// What produced an output directory: command, merged configuration,
/// input fingerprint, code version and seed.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: &'static str,
    pub seed: u64,
    pub corpus_fingerprint: Option<String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: RunConfig) -> Self {
        RunManifest {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION"),
            seed,
            corpus_fingerprint: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            config,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }
}

/// SHA-256 of one file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
