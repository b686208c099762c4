use std::path::{Path, PathBuf};
use std::time::Duration;

use panelmi::data::io::write_atomic;
use panelmi::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Record of one subcommand run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            args: std::env::args().skip(1).collect(),
            config_paths: Vec::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            duration_seconds: 0.0,
        }
    }

    pub fn write(mut self, dir: &Path, elapsed: Duration) -> Result<()> {
        self.duration_seconds = elapsed.as_secs_f64();
        let text = serde_json::to_string_pretty(&self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

/// Reject inputs produced by a different tool version. Inputs without a
/// manifest alongside them are accepted as user-supplied.
pub fn check_upstream(input: &Path) -> Result<()> {
    let dir = input.parent().unwrap_or(Path::new("."));
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(());
    }
    let upstream: RunManifest = panelmi::error::parse_json(&std::fs::read_to_string(&path)?)?;
    if upstream.tool_version != TOOL_VERSION {
        return Err(Error::BadConfig {
            pointer: "/tool_version".into(),
            msg: format!(
                "{} was written by version {}, this is {TOOL_VERSION}",
                path.display(),
                upstream.tool_version
            ),
        });
    }
    Ok(())
}
