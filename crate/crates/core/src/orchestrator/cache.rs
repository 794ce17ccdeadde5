//! Content-addressed stage cache. An entry holds a stage's artifacts under
//! `<root>/<key>/files/` and their hashes in `<root>/<key>/entry.json`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{Artifact, StageStatus};
use crate::error::{Error, Result};
use crate::imaging::file_hash;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CacheEntry {
    pub status: StageStatus,
    pub artifacts: Vec<Artifact>,
}

pub(crate) struct StageCache {
    root: PathBuf,
}

/// Held while an entry is read or written; released on drop.
pub(crate) struct EntryLock {
    _file: File,
}

impl StageCache {
    pub fn new(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(StageCache { root })
    }

    pub fn lock(&self, key: &str) -> Result<EntryLock> {
        let path = self.root.join(format!("{key}.lock"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.lock().map_err(|e| Error::io(&path, e))?;
        Ok(EntryLock { _file: file })
    }

    /// Copies a cached entry into `run_dir`. A missing or corrupted entry is a miss.
    pub fn restore(&self, key: &str, run_dir: &Path) -> Result<Option<CacheEntry>> {
        let dir = self.root.join(key);
        let Ok(text) = fs::read_to_string(dir.join("entry.json")) else { return Ok(None) };
        let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) else { return Ok(None) };
        for a in &entry.artifacts {
            let src = dir.join("files").join(&a.path);
            if !src.is_file() || file_hash(&src)? != a.sha256 {
                log::warn!("cache entry {key} is stale at {}", a.path);
                return Ok(None);
            }
        }
        for a in &entry.artifacts {
            let dst = run_dir.join(&a.path);
            if let Some(p) = dst.parent() {
                fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            fs::copy(dir.join("files").join(&a.path), &dst).map_err(|e| Error::io(&dst, e))?;
        }
        Ok(Some(entry))
    }

    pub fn store(&self, key: &str, run_dir: &Path, entry: &CacheEntry) -> Result<()> {
        let tmp = self.root.join(format!("{key}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        for a in &entry.artifacts {
            let dst = tmp.join("files").join(&a.path);
            if let Some(p) = dst.parent() {
                fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            fs::copy(run_dir.join(&a.path), &dst).map_err(|e| Error::io(&dst, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let json = serde_json::to_string_pretty(entry).map_err(|e| Error::json("cache entry", e))?;
        fs::write(tmp.join("entry.json"), json).map_err(|e| Error::io(&tmp, e))?;
        let dir = self.root.join(key);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))
    }
}
