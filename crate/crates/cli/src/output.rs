//! Output directories: one run at a time, no silent overwrites.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use dgow::io::{write_atomic, LIBRARY_VERSION};

pub const REPORT_SCHEMA: u32 = 1;
const LOCK_FILE: &str = ".dgow.lock";

/// Stamped into every report.
#[derive(Clone, Debug, Serialize)]
pub struct Stamp {
    pub schema_version: u32,
    pub library_version: &'static str,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            library_version: LIBRARY_VERSION,
            config_hash: config_hash.into(),
        }
    }

    /// First line of CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!(
            "# schema_version={} library_version={} config_hash={}\n",
            self.schema_version, self.library_version, self.config_hash
        )
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    stamp: &'a Stamp,
    #[serde(flatten)]
    body: &'a T,
}

/// An output directory held under a lock file until dropped.
pub struct RunDir {
    dir: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Fails when another run holds the directory, or when any of `artifacts`
    /// already exists and `force` is off.
    pub fn acquire(dir: &Path, artifacts: &[&str], force: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| {
                format!("{} is in use by another run (remove {} if stale)", dir.display(), lock.display())
            })?;
        let run = Self {
            dir: dir.to_owned(),
            lock,
        };
        if !force {
            let existing: Vec<&str> = artifacts.iter().copied().filter(|a| dir.join(a).exists()).collect();
            if !existing.is_empty() {
                bail!(
                    "{} already holds {}; pass --force to overwrite",
                    dir.display(),
                    existing.join(", ")
                );
            }
        }
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        log::info!("wrote {}", self.path(name).display());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, stamp: &Stamp, body: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&Stamped { stamp, body })?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
