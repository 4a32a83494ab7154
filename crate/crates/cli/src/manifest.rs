use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

pub const FILE: &str = "manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub build_id: &'static str,
    pub wallclock_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            build_id: env!("RGDN_BUILD_ID"),
            wallclock_s: 0.0,
        })
    }

    pub fn write(&mut self, dir: &Path, started: Instant) -> Result<PathBuf> {
        self.wallclock_s = started.elapsed().as_secs_f64();
        let path = dir.join(FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
