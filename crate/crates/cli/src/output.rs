use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use symode_core::Dataset;

use crate::config::RunConfig;
use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METADATA: &str = "metadata.json";

/// Output directory of one command run.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Write { path: root.to_owned(), source })?;
        Ok(Self { root: root.to_owned() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|source| CliError::Write { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let io_err = |e: csv::Error| CliError::Write { path: path.clone(), source: e.into() };
        let mut writer = csv::Writer::from_path(&path).map_err(io_err)?;
        for row in rows {
            writer.serialize(row).map_err(io_err)?;
        }
        writer.flush().map_err(|source| CliError::Write { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn write_resolved_config(&self, cfg: &RunConfig) -> Result<PathBuf, CliError> {
        self.write_text(RESOLVED_CONFIG, &cfg.to_flat_toml()?)
    }

    /// Run facts that change between otherwise identical runs.
    pub fn write_metadata(&self, command: &str, started: SystemTime, wall: Duration) -> Result<PathBuf, CliError> {
        #[derive(Serialize)]
        struct Metadata<'a> {
            command: &'a str,
            version: &'a str,
            started_unix_seconds: u64,
            wall_time_seconds: f64,
        }
        let started_unix_seconds = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self.write_json(
            METADATA,
            &Metadata {
                command,
                version: env!("CARGO_PKG_VERSION"),
                started_unix_seconds,
                wall_time_seconds: wall.as_secs_f64(),
            },
        )
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_owned(), source })?;
    let dataset: Dataset =
        serde_json::from_str(&text).map_err(|e| CliError::Dataset { path: path.to_owned(), message: e.to_string() })?;
    dataset.validate().map_err(|e| CliError::Dataset { path: path.to_owned(), message: e.to_string() })?;
    Ok(dataset)
}
