//! Run reports and the mapping from errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use xcam_core::Error;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_FILE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_USAGE: u8 = 64;

/// Stable exit code for an error, chosen by the first library error in its
/// cause chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::File { .. } | Error::Io(_) => EXIT_FILE,
                Error::NonFinite(_) => EXIT_NUMERIC,
                Error::Json(_) => EXIT_INTERNAL,
                _ => EXIT_INPUT,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_FILE;
        }
        if cause.downcast_ref::<InputError>().is_some() {
            return EXIT_INPUT;
        }
    }
    EXIT_INTERNAL
}

/// A bad command-line value that clap cannot check on its own.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub config: Value,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
    pub metrics: Value,
    pub wall_time_seconds: Option<f64>,
}

/// Collects artifacts written under one output directory.
pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<String>,
    started: Instant,
    record_time: bool,
}

impl OutDir {
    pub fn create(root: &Path, record_time: bool) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_at(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
            started: Instant::now(),
            record_time,
        })
    }

    /// Path for a new artifact, recorded for the run report.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.root.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.artifact(name);
        write_text(&path, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.artifact(name);
        write_text(&path, text)
    }

    /// Writes `report.json` and logs the elapsed time.
    pub fn finish(self, command: &'static str, config: Value, metrics: Value) -> Result<()> {
        let elapsed = self.started.elapsed().as_secs_f64();
        log::info!(
            "{command} finished in {elapsed:.2}s; outputs in {}",
            self.root.display()
        );
        let mut artifacts = self.artifacts;
        artifacts.push("report.json".to_string());
        let report = RunReport {
            command,
            config,
            artifacts,
            metrics,
            wall_time_seconds: self.record_time.then_some(elapsed),
        };
        write_text(
            &self.root.join("report.json"),
            &(serde_json::to_string_pretty(&report)? + "\n"),
        )
    }
}

fn io_at(path: &Path, source: std::io::Error) -> anyhow::Error {
    anyhow::Error::new(Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| io_at(path, e))
        .with_context(|| format!("writing {}", path.display()))
}
