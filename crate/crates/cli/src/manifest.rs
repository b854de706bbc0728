//! `run.json`: what a command was run with and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    /// Resolved configuration after config file and flag overrides.
    pub config: serde_json::Value,
    /// File name → SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// File name → SHA-256 of every artifact, relative to the output.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> anyhow::Result<Self> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(file_name(path), sha256_file(path)?);
        Ok(())
    }

    /// Records `path` under its name relative to `root`.
    pub fn artifact(&mut self, root: &Path, path: &Path) -> anyhow::Result<()> {
        let name = path
            .strip_prefix(root)
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| file_name(path));
        self.artifacts.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `dir/run.json` for directory outputs, `stem.run.json` beside file outputs.
pub fn manifest_path_for_file(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.run.json"))
}
