//! Output-directory ownership, result writing and the run summary.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const LOCK_NAME: &str = ".kickoff.lock";

/// Held for the lifetime of a command; removes the lock file on drop.
pub struct OutputDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(OutputDir { root: root.to_path_buf(), lock }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                bail!("{} is locked by another run (remove {} if stale)", root.display(), lock.display())
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", lock.display())),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    /// Writes `results/<name>` and returns the relative name.
    pub fn write_result(&self, name: &str, contents: &str) -> Result<String> {
        let dir = self.results();
        fs::create_dir_all(&dir)?;
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(format!("results/{name}"))
    }

    pub fn read_result(&self, name: &str) -> Result<Option<String>> {
        let path = self.results().join(name);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of every file in a directory keyed by file name.
pub fn digest_inputs(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            let name = format!("{}/{}", path.display(), p.file_name().unwrap().to_string_lossy());
            out.insert(name, sha256_hex(&fs::read(&p)?));
        }
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        out.insert(path.display().to_string(), sha256_hex(&bytes));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommandRecord {
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Summary {
    pub tool: String,
    pub version: String,
    pub parallel_feature: bool,
    pub commands: BTreeMap<String, CommandRecord>,
}

/// Merges one command's record into `results/summary.json`. No wall-clock
/// fields, so reruns on identical inputs reproduce the same bytes.
pub fn record_command(out: &OutputDir, command: &str, record: CommandRecord) -> Result<()> {
    let mut summary: Summary = match out.read_result("summary.json")? {
        Some(text) => serde_json::from_str(&text).context("parsing existing summary.json")?,
        None => Summary::default(),
    };
    summary.tool = "kickoff".into();
    summary.version = env!("CARGO_PKG_VERSION").into();
    summary.parallel_feature = cfg!(feature = "parallel");
    summary.commands.insert(command.to_string(), record);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    out.write_result("summary.json", &text)?;
    Ok(())
}

/// Output digests for the summary.
pub fn digest_outputs(out: &OutputDir, names: &[String]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), sha256_hex(&fs::read(out.root().join(n))?))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputDir::acquire(dir.path()).unwrap();
        assert!(OutputDir::acquire(dir.path()).is_err());
        drop(a);
        assert!(OutputDir::acquire(dir.path()).is_ok());
    }

    #[test]
    fn sha_of_empty() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
