use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

pub const MANIFEST: &str = "manifest.json";

/// Record of one command invocation, written into its output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            config_hash: None,
            version: env!("DEBIAS_VERSION").into(),
            seed: None,
            started: now(),
            finished: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(mut self, out: &Path) -> debias::Result<()> {
        self.finished = now();
        fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }
}
