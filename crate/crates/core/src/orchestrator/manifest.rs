use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imaging::file_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Cached,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_key: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub wall_time_ms: u64,
    pub denoise_passes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: PipelineConfig,
    /// `video` and `style` content hashes.
    pub inputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub overlap_skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_image: Option<Artifact>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn total_denoise_passes(&self) -> u64 {
        self.stages.iter().map(|s| s.denoise_passes).sum()
    }

    /// Every artifact of every stage, by path.
    pub fn artifact_hashes(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.artifacts.iter()).map(|a| (a.path.clone(), a.sha256.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("run manifest", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Checks that every completed or cached stage's artifacts exist under
    /// `run_dir` with the recorded hashes.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for s in &self.stages {
            if !matches!(s.status, StageStatus::Completed | StageStatus::Cached) {
                continue;
            }
            for a in &s.artifacts {
                let p = run_dir.join(&a.path);
                if !p.is_file() || file_hash(&p)? != a.sha256 {
                    return Err(Error::Validation(format!("stage {}: artifact {} missing or modified", s.name, a.path)));
                }
            }
        }
        Ok(())
    }
}

/// Files under `rel` (a file or a directory) relative to `root`, sorted,
/// with `/` separators.
pub(crate) fn list_files(root: &Path, rel: &str) -> Result<Vec<String>> {
    let path = root.join(rel);
    if path.is_file() {
        return Ok(vec![rel.to_string()]);
    }
    if !path.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut names: Vec<String> = fs::read_dir(&path)
        .map_err(|e| Error::io(&path, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.sort();
    for n in names {
        out.extend(list_files(root, &format!("{rel}/{n}"))?);
    }
    Ok(out)
}

pub(crate) fn artifacts(root: &Path, rels: &[String]) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for rel in rels {
        for path in list_files(root, rel)? {
            let sha256 = file_hash(&root.join(&path))?;
            out.push(Artifact { path, sha256 });
        }
    }
    Ok(out)
}

/// Hash over the names and contents of everything under `rels`.
pub(crate) fn tree_hash(root: &Path, rels: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    for rel in rels {
        let files = list_files(root, rel)?;
        if files.is_empty() {
            return Err(Error::Validation(format!("missing stage input {}", root.join(rel).display())));
        }
        for a in artifacts(root, &files)? {
            h.update(a.path.as_bytes());
            h.update(a.sha256.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}
