use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quadbench::config::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputFile>,
    pub input_hash: String,
    pub output_dir: PathBuf,
    pub strict_determinism: bool,
    pub version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<InputFile> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputFile {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// Drops the flags that only choose where output goes.
pub fn hashed_args(args: &[String]) -> Vec<String> {
    const LOCATION: [&str; 2] = ["--run-dir", "--out-root"];
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if LOCATION.contains(&a.as_str()) {
            skip = true;
            continue;
        }
        if LOCATION.iter().any(|f| a.starts_with(&format!("{f}="))) {
            continue;
        }
        out.push(a.clone());
    }
    out
}

/// Content hash over the command, its arguments, the resolved config and input files.
pub fn input_hash(command: &str, args: &[String], config: &RunConfig, inputs: &[InputFile]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    for a in hashed_args(args) {
        h.update([0]);
        h.update(a.as_bytes());
    }
    h.update(serde_json::to_vec(config)?);
    for i in inputs {
        h.update(i.sha256.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        m.config.validate().context("manifest config")?;
        Ok(m)
    }

    /// Fails when a recorded input file is missing or changed.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = hash_file(&input.path)?;
            if now.sha256 != input.sha256 {
                bail!("input {} changed since the run was recorded", input.path.display());
            }
        }
        Ok(())
    }
}
