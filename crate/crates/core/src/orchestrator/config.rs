use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::evaluation::ScorerConfig;
use crate::overlay::OverlayConfig;
use crate::perception::PerceptionConfig;
use crate::style::StyleTransferConfig;
use crate::trajectory::ArrowConfig;

pub const CACHE_ENV: &str = "ILLUSIGN_CACHE";

/// Everything a run depends on, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    /// Denoising steps T.
    pub steps: usize,
    pub seed: u64,
    pub style: StyleTransferConfig,
    pub overlay: OverlayConfig,
    pub arrows: ArrowConfig,
    pub perception: PerceptionConfig,
    pub scorers: ScorerConfig,
    pub skip_overlay: bool,
    pub no_arrows: bool,
    pub start_frame: Option<usize>,
    pub end_frame: Option<usize>,
    pub output_dir: PathBuf,
    /// Defaults to a short hash of the config and inputs.
    pub run_id: Option<String>,
    /// Stage cache root; `ILLUSIGN_CACHE` wins, then this, then `<output_dir>/.cache`.
    pub cache_dir: Option<PathBuf>,
    pub use_cache: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::default(),
            steps: 100,
            seed: 0,
            style: StyleTransferConfig::default(),
            overlay: OverlayConfig::default(),
            arrows: ArrowConfig::default(),
            perception: PerceptionConfig::default(),
            scorers: ScorerConfig::default(),
            skip_overlay: false,
            no_arrows: false,
            start_frame: None,
            end_frame: None,
            output_dir: PathBuf::from("out"),
            run_id: None,
            cache_dir: None,
            use_cache: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        self.style.validate(self.steps)?;
        self.overlay.validate(self.steps)?;
        if self.arrows.degree == 0 {
            return Err(Error::Validation("arrow spline degree must be >= 1".into()));
        }
        if self.arrows.curve_samples < 2 {
            return Err(Error::Validation("arrow curve_samples must be >= 2".into()));
        }
        if let (Some(s), Some(e)) = (self.start_frame, self.end_frame) {
            if s >= e {
                return Err(Error::Validation(format!("start frame {s} must precede end frame {e}")));
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::Validation(format!("run id `{id}` must be non-empty [A-Za-z0-9_-]")));
            }
        }
        Ok(())
    }

    /// Cache root after applying `ILLUSIGN_CACHE`.
    pub fn cache_root(&self) -> PathBuf {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join(".cache")),
        }
    }

    /// The config with run-location fields cleared; what the run id hashes.
    pub fn content(&self) -> PipelineConfig {
        PipelineConfig { output_dir: PathBuf::new(), run_id: None, cache_dir: None, use_cache: true, ..self.clone() }
    }
}
