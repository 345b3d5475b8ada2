use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Value};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Provenance record written next to every command's outputs.
pub struct RunManifest {
    command: String,
    config: Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    started: Instant,
    started_unix: u64,
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            artifacts: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Writes `manifest.json` into `dir`, replacing any earlier one.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let names: Vec<String> = self
            .artifacts
            .iter()
            .map(|p| {
                p.strip_prefix(dir)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect();
        let doc = json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "artifacts": names,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "started_unix": self.started_unix,
            "wall_clock_secs": self.started.elapsed().as_secs_f64(),
        });
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Directory that receives a file's manifest.
pub fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}
