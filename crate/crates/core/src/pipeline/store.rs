//! Run-directory bookkeeping: lockfile, per-stage checksums for `--resume`,
//! and the manifest listing every artifact.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::StageSeeds;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
const MANIFEST_FORMAT: &str = "mindloop-run-v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(Error::file(path))?))
}

/// Digest of a serializable value's JSON form.
pub fn key_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Digest of everything the stage's outputs depend on.
    pub key: String,
    pub outputs: Vec<FileRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub seeds: StageSeeds,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
}

/// Exclusive ownership of a run directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::contract(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct RunStore {
    pub dir: PathBuf,
    previous: Option<RunManifest>,
    stages: Vec<StageRecord>,
    _lock: RunLock,
}

impl RunStore {
    /// Locks `dir`; with `resume`, remembers the previous manifest so
    /// matching stages can be skipped.
    pub fn open(dir: &Path, resume: bool) -> Result<Self> {
        let lock = RunLock::acquire(dir)?;
        let mpath = dir.join(MANIFEST_FILE);
        let previous = if resume && mpath.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&mpath).map_err(Error::file(&mpath))?)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            previous,
            stages: Vec::new(),
            _lock: lock,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// True when the previous run finished this stage with the same key and
    /// its outputs are still intact. A reused stage is carried over.
    pub fn reuse(&mut self, name: &str, key: &str) -> bool {
        let Some(prev) = &self.previous else {
            return false;
        };
        let Some(rec) = prev.stages.iter().find(|s| s.name == name && s.key == key) else {
            return false;
        };
        let intact = rec
            .outputs
            .iter()
            .all(|f| file_sha256(&self.dir.join(&f.path)).is_ok_and(|h| h == f.sha256));
        if intact {
            self.stages.push(rec.clone());
        }
        intact
    }

    pub fn record(&mut self, name: &str, key: &str, outputs: &[&str]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| {
                Ok(FileRecord {
                    path: p.to_string(),
                    sha256: file_sha256(&self.dir.join(p))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.stages.retain(|s| s.name != name);
        self.stages.push(StageRecord {
            name: name.to_string(),
            key: key.to_string(),
            outputs,
        });
        Ok(())
    }

    /// Writes the manifest listing every file under the run directory.
    pub fn finish(&self, seeds: &StageSeeds, config_text: &str) -> Result<RunManifest> {
        let mut files = Vec::new();
        collect_files(&self.dir, &self.dir, &mut files)?;
        files.sort();
        let files = files
            .into_iter()
            .map(|rel| {
                Ok(FileRecord {
                    sha256: file_sha256(&self.dir.join(&rel))?,
                    path: rel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            seeds: seeds.clone(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            stages: self.stages.clone(),
            files,
        };
        fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("walked under root");
        let rel = rel.to_string_lossy().replace('\\', "/");
        if rel != MANIFEST_FILE && rel != LOCK_FILE {
            out.push(rel);
        }
    }
    Ok(())
}
