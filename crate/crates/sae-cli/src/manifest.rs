//! Run manifests: a JSON record of the command, content digests of every
//! input file, the seed, and the tool version, written alongside outputs so
//! a run can be reproduced and verified.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use sae_core::Result;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Input path -> sha256 content digest.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            inputs: BTreeMap::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs
            .insert(path.display().to_string(), format!("sha256:{hex}"));
        Ok(())
    }

    pub fn add_inputs(&mut self, paths: &[&PathBuf]) -> Result<()> {
        for p in paths {
            self.add_input(p)?;
        }
        Ok(())
    }

    /// Write `manifest.json` into the output directory.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
