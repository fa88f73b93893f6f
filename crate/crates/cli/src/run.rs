//! Per-run plumbing shared by every subcommand: output lock, resolved-config
//! snapshot and the mapping from failures to exit codes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_LOCKED: i32 = 5;

pub const LOCK_FILE: &str = ".facectl.lock";
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const DESCRIPTOR_FILE: &str = "run.json";

/// Another run holds the output directory.
#[derive(Debug, thiserror::Error)]
#[error("output directory {0} is locked by another run (remove {LOCK_FILE} if stale)")]
pub struct Locked(pub PathBuf);

/// Bad command-line input that is not a config file problem.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    use facectl::Error as E;
    if err.downcast_ref::<Locked>().is_some() {
        return EXIT_LOCKED;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<facectl::Error>() {
        Some(E::Config(_) | E::Validation(_)) => EXIT_CONFIG,
        Some(E::Data(_) | E::Integrity { .. } | E::Version { .. } | E::Io { .. }) => EXIT_DATA,
        Some(E::Checkpoint(_)) => EXIT_CHECKPOINT,
        _ => EXIT_OTHER,
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Locked(dir.to_path_buf()).into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// What was run, written as `run.json` beside the outputs.
#[derive(Debug, Serialize)]
pub struct RunDescriptor {
    pub subcommand: String,
    pub config: PathBuf,
    pub inputs: BTreeMap<String, String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

impl RunDescriptor {
    pub fn input(&mut self, key: &str, value: impl ToString) {
        self.inputs.insert(key.to_string(), value.to_string());
    }

    /// Writes the descriptor and the resolved config into `out`.
    pub fn write(&self, resolved: &str) -> Result<()> {
        write_file(&self.out.join(SNAPSHOT_FILE), resolved.as_bytes())?;
        write_file(&self.out.join(DESCRIPTOR_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| facectl::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).err().unwrap();
        assert_eq!(exit_code(&err), EXIT_LOCKED);
        drop(a);
        assert!(!dir.path().join(LOCK_FILE).exists());
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn core_errors_map_to_distinct_codes() {
        let code = |e: facectl::Error| exit_code(&anyhow::Error::new(e).context("while running"));
        assert_eq!(code(facectl::Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(code(facectl::Error::Data("x".into())), EXIT_DATA);
        assert_eq!(code(facectl::Error::Checkpoint("x".into())), EXIT_CHECKPOINT);
        assert_eq!(code(facectl::Error::Shape("x".into())), EXIT_OTHER);
        let all = [EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_LOCKED];
        let mut uniq = all.to_vec();
        uniq.dedup();
        assert_eq!(uniq.len(), all.len());
        assert!(!all.contains(&0));
    }
}
