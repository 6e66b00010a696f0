//! `manifest.json`: what a command was asked to do and what it wrote.
//!
//! `argv` holds the resolved invocation minus `--output-dir`; appending a
//! fresh `--output-dir` and running it again regenerates the artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
    /// Command parameters after defaults were applied.
    pub config: serde_json::Value,
    /// Written files, relative to the output directory.
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            config: serde_json::Value::Null,
            ..Default::default()
        }
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
