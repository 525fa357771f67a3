//! Output directory bookkeeping. Every file written goes through
//! [`Artifacts`] so the manifest lists exactly what is on disk.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_MARKER: &str = ".failed";

pub struct Artifacts {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl Artifacts {
    /// Creates `root` and clears a stale failure marker from an earlier run.
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        let marker = root.join(FAILED_MARKER);
        if marker.exists() {
            std::fs::remove_file(marker)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeSet::new(),
        })
    }

    /// Absolute path for `rel`, creating parent directories and recording it.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.insert(rel.to_owned());
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<(), CliError> {
        let p = self.path(rel)?;
        std::fs::write(p, contents)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        self.write(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn files(&self) -> Vec<String> {
        self.files.iter().cloned().collect()
    }

    /// Writes the manifest, plus the failure marker when `error` is set.
    pub fn finish<S: Serialize>(mut self, command: &str, config: &RunConfig, scenarios: &[S], error: Option<&CliError>) -> Result<(), CliError> {
        if let Some(e) = error {
            self.write(FAILED_MARKER, &format!("{e}\n"))?;
        }
        let manifest = Manifest {
            tool: "flowcast",
            version: env!("CARGO_PKG_VERSION"),
            checkpoint_format: flowcast_core::nn::CHECKPOINT_VERSION,
            command,
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.map(ToString::to_string),
            seed: config.seed,
            config,
            scenarios,
            files: self.files(),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a, S: Serialize> {
    tool: &'static str,
    version: &'static str,
    checkpoint_format: u32,
    command: &'a str,
    status: &'static str,
    error: Option<String>,
    seed: u64,
    config: &'a RunConfig,
    scenarios: &'a [S],
    files: Vec<String>,
}
