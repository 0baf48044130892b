use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    started_utc: String,
    finished_utc: Option<String>,
    status: &'a str,
    args: Vec<String>,
    config: Option<&'a toml::Value>,
    outputs: &'a [String],
}

/// Per-invocation output directory `<root>/<subcommand>_<UTC timestamp>`.
pub struct RunDir {
    pub path: PathBuf,
    subcommand: String,
    started: String,
    config: Option<toml::Value>,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, subcommand: &str) -> Result<Self> {
        let now = Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.3fZ");
        let mut path = root.join(format!("{subcommand}_{stamp}"));
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{subcommand}_{stamp}_{n}"));
            n += 1;
        }
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        let run = Self {
            path,
            subcommand: subcommand.to_string(),
            started: now.to_rfc3339(),
            config: None,
            outputs: Vec::new(),
        };
        run.write_manifest("running", None)?;
        log::info!("run directory {}", run.path.display());
        Ok(run)
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Logs and stores the fully resolved config of this run.
    pub fn record_config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        let text = crate::config::to_toml(cfg)?;
        log::info!("resolved config:\n{text}");
        let path = self.join(RESOLVED_CONFIG);
        fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
        self.config = Some(toml::Value::try_from(cfg).map_err(|e| CliError::Config(e.to_string()))?);
        self.write_manifest("running", None)
    }

    pub fn add_output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    fn write_manifest(&self, status: &str, finished: Option<String>) -> Result<()> {
        let m = Manifest {
            subcommand: &self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            started_utc: self.started.clone(),
            finished_utc: finished,
            status,
            args: std::env::args().collect(),
            config: self.config.as_ref(),
            outputs: &self.outputs,
        };
        let path = self.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::io(&path, e))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    pub fn finish(&self, ok: bool) -> Result<()> {
        self.write_manifest(if ok { "succeeded" } else { "failed" }, Some(Utc::now().to_rfc3339()))
    }
}
