//! Perception adapters: sign segmentation, edge maps, hand and arm masks,
//! fingertip tracking.
//!
//! Every adapter has three modes with the same contract:
//! - `fixture`: outputs read from `fixtures/<adapter>/<hash>/`, keyed by the
//!   sha256 of the decoded input pixels (videos: of the per-frame hashes)
//! - `command`: an external program is run as `<cmd...> <input> <out_dir>`
//!   and must write the fixture layout into `out_dir`
//! - `classical`: built-in fallbacks (gradient edges, colour-keyed masks,
//!   marker tracking, motion-energy segmentation)

mod classical;
mod keypoints;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_rgb, pixel_hash, save_png};
use crate::overlay::{MaskKind, SpatialMask};

pub use classical::{gradient_edges, ClassicalConfig};
pub use keypoints::{build_track, pair_detections, Detection, FrameDetections, Hand, KeypointTrack};

pub const FIXTURES_ENV: &str = "ILLUSIGN_FIXTURES";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    Segment,
    Edges,
    Hands,
    Arms,
    Keypoints,
}

impl Adapter {
    pub fn as_str(self) -> &'static str {
        match self {
            Adapter::Segment => "segment",
            Adapter::Edges => "edges",
            Adapter::Hands => "hands",
            Adapter::Arms => "arms",
            Adapter::Keypoints => "keypoints",
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// fixture when `ILLUSIGN_FIXTURES=1`, else command when configured, else classical
    #[default]
    Auto,
    Fixture,
    Command,
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub mode: AdapterMode,
    pub modes: BTreeMap<Adapter, AdapterMode>,
    pub fixtures_dir: PathBuf,
    pub commands: BTreeMap<Adapter, String>,
    pub min_frames: usize,
    pub confidence_threshold: f64,
    pub max_gap: usize,
    pub hands_prompt: String,
    pub classical: ClassicalConfig,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            mode: AdapterMode::Auto,
            modes: BTreeMap::new(),
            fixtures_dir: PathBuf::from("fixtures"),
            commands: BTreeMap::new(),
            min_frames: 4,
            confidence_threshold: 0.5,
            max_gap: 2,
            hands_prompt: "hands".into(),
            classical: ClassicalConfig::default(),
        }
    }
}

impl PerceptionConfig {
    pub fn fixtures_forced() -> bool {
        std::env::var(FIXTURES_ENV).is_ok_and(|v| v == "1")
    }

    /// Concrete mode for `adapter` after applying the environment override,
    /// per-adapter settings and `auto` resolution.
    pub fn resolve(&self, adapter: Adapter) -> AdapterMode {
        if Self::fixtures_forced() {
            return AdapterMode::Fixture;
        }
        match self.modes.get(&adapter).copied().unwrap_or(self.mode) {
            AdapterMode::Auto if self.commands.contains_key(&adapter) => AdapterMode::Command,
            AdapterMode::Auto => AdapterMode::Classical,
            m => m,
        }
    }

    pub fn fixture_dir(&self, adapter: Adapter, key: &str) -> PathBuf {
        self.fixtures_dir.join(adapter.as_str()).join(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySource {
    Model,
    ManualOverride,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignBoundaries {
    pub start_frame: usize,
    pub end_frame: usize,
    pub source: BoundarySource,
}

impl SignBoundaries {
    pub fn new(start_frame: usize, end_frame: usize, source: BoundarySource, frame_count: usize) -> Result<Self> {
        if start_frame >= end_frame {
            return Err(Error::Validation(format!("degenerate boundaries: start {start_frame} >= end {end_frame}")));
        }
        if end_frame >= frame_count {
            return Err(Error::Validation(format!("end frame {end_frame} outside video of {frame_count} frames")));
        }
        Ok(SignBoundaries { start_frame, end_frame, source })
    }
}

/// A video as an ordered directory of still frames (png/jpg, sorted by name).
#[derive(Debug, Clone)]
pub struct Video {
    pub dir: PathBuf,
    frames: Vec<PathBuf>,
}

impl Video {
    pub fn open(dir: &Path) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut frames = Vec::new();
        for entry in rd {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                frames.push(p);
            }
        }
        if frames.is_empty() {
            return Err(Error::Validation(format!("no frames (png/jpg) in {}", dir.display())));
        }
        frames.sort();
        Ok(Video { dir: dir.to_path_buf(), frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_path(&self, i: usize) -> Result<&Path> {
        self.frames
            .get(i)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Validation(format!("frame {i} outside video of {} frames", self.len())))
    }

    pub fn frame(&self, i: usize) -> Result<RgbImage> {
        load_rgb(self.frame_path(i)?)
    }

    pub fn frames(&self) -> Result<Vec<RgbImage>> {
        self.frames.iter().map(|p| load_rgb(p)).collect()
    }

    /// Content key: sha256 over the per-frame pixel hashes.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for f in self.frames()? {
            h.update(pixel_hash(&f).as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn require(adapter: Adapter, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::FixtureMissing { adapter: adapter.as_str(), path })
    }
}

/// Runs the configured command for `adapter` and returns the directory it wrote.
fn run_command(cfg: &PerceptionConfig, adapter: Adapter, input: &Path, work: &Path) -> Result<PathBuf> {
    let cmd = cfg
        .commands
        .get(&adapter)
        .ok_or_else(|| Error::Adapter { adapter: adapter.as_str(), reason: "no command configured".into() })?;
    let mut parts = cmd.split_whitespace();
    let prog = parts
        .next()
        .ok_or_else(|| Error::Adapter { adapter: adapter.as_str(), reason: "empty command".into() })?;
    let out = work.join("out");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    log::info!("{adapter}: running {cmd}");
    let status = Command::new(prog)
        .args(parts)
        .arg(input)
        .arg(&out)
        .status()
        .map_err(|e| Error::Adapter { adapter: adapter.as_str(), reason: format!("{prog}: {e}") })?;
    if !status.success() {
        return Err(Error::Adapter { adapter: adapter.as_str(), reason: format!("{prog} exited with {status}") });
    }
    Ok(out)
}

fn temp_work(adapter: Adapter) -> Result<tempfile::TempDir> {
    tempfile::Builder::new()
        .prefix(&format!("illusign-{adapter}-"))
        .tempdir()
        .map_err(|e| Error::io(std::env::temp_dir(), e))
}

fn image_command(cfg: &PerceptionConfig, adapter: Adapter, img: &RgbImage) -> Result<(tempfile::TempDir, PathBuf)> {
    let work = temp_work(adapter)?;
    let input = work.path().join("input.png");
    save_png(&input, img)?;
    let out = run_command(cfg, adapter, &input, work.path())?;
    Ok((work, out))
}

#[derive(Deserialize)]
struct BoundaryFile {
    start_frame: usize,
    end_frame: usize,
}

/// Start and end frames of the sign stroke. Explicit overrides win; videos
/// shorter than `min_frames` require them.
pub fn segment_sign(
    video: &Video,
    start_override: Option<usize>,
    end_override: Option<usize>,
    cfg: &PerceptionConfig,
) -> Result<SignBoundaries> {
    let n = video.len();
    if let (Some(s), Some(e)) = (start_override, end_override) {
        return SignBoundaries::new(s, e, BoundarySource::ManualOverride, n);
    }
    if n < cfg.min_frames {
        return Err(Error::Validation(format!(
            "video has {n} frames (< {}); segmentation is unreliable, pass --start and --end",
            cfg.min_frames
        )));
    }
    let (mut s, mut e) = match cfg.resolve(Adapter::Segment) {
        AdapterMode::Fixture => {
            let key = video.content_hash()?;
            let path = require(Adapter::Segment, cfg.fixture_dir(Adapter::Segment, &key).join("boundaries.json"))?;
            let b: BoundaryFile = read_json(&path)?;
            (b.start_frame, b.end_frame)
        }
        AdapterMode::Command => {
            let work = temp_work(Adapter::Segment)?;
            let out = run_command(cfg, Adapter::Segment, &video.dir, work.path())?;
            let b: BoundaryFile = read_json(&out.join("boundaries.json"))?;
            (b.start_frame, b.end_frame)
        }
        _ => classical::motion_segment(&video.frames()?)
            .ok_or_else(|| Error::Adapter { adapter: "segment", reason: "no motion found; pass --start and --end".into() })?,
    };
    let mut source = BoundarySource::Model;
    if let Some(v) = start_override {
        s = v;
        source = BoundarySource::ManualOverride;
    }
    if let Some(v) = end_override {
        e = v;
        source = BoundarySource::ManualOverride;
    }
    SignBoundaries::new(s, e, source, n)
}

/// Dark-on-light line drawing of `img` at the same resolution. Adapter
/// failures fall back to the classical gradient extractor.
pub fn extract_edges(img: &RgbImage, cfg: &PerceptionConfig) -> Result<GrayImage> {
    let external = match cfg.resolve(Adapter::Edges) {
        AdapterMode::Fixture => {
            let path = cfg.fixture_dir(Adapter::Edges, &pixel_hash(img)).join("edges.png");
            require(Adapter::Edges, path).and_then(|p| load_gray(&p))
        }
        AdapterMode::Command => image_command(cfg, Adapter::Edges, img).and_then(|(_w, out)| load_gray(&out.join("edges.png"))),
        _ => return Ok(gradient_edges(img, &cfg.classical)),
    };
    match external {
        Ok(e) if e.dimensions() == img.dimensions() => Ok(e),
        Ok(e) => {
            log::warn!("edges adapter returned {:?} for a {:?} image; using gradient edges", e.dimensions(), img.dimensions());
            Ok(gradient_edges(img, &cfg.classical))
        }
        Err(err) => {
            log::warn!("edges adapter failed ({err}); using gradient edges");
            Ok(gradient_edges(img, &cfg.classical))
        }
    }
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_luma8())
}

fn prompt_slug(prompt: &str) -> String {
    prompt.trim().to_ascii_lowercase().split_whitespace().collect::<Vec<_>>().join("_")
}

fn masks_in(dir: &Path, kind: MaskKind) -> Result<Vec<SpatialMask>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_mask(p, kind)).collect()
}

/// Hand masks for a text prompt ("hands", "left hand", "right hand").
/// No detection gives an empty list.
pub fn hand_masks(img: &RgbImage, prompt: &str, cfg: &PerceptionConfig) -> Result<Vec<SpatialMask>> {
    if prompt.trim().is_empty() {
        return Err(Error::Validation("hand mask prompt is empty".into()));
    }
    let masks = match cfg.resolve(Adapter::Hands) {
        AdapterMode::Fixture => {
            let dir = cfg.fixture_dir(Adapter::Hands, &pixel_hash(img)).join(prompt_slug(prompt));
            masks_in(&require(Adapter::Hands, dir)?, MaskKind::HandsStart)?
        }
        AdapterMode::Command => {
            let (_work, out) = image_command(cfg, Adapter::Hands, img)?;
            let dir = out.join(prompt_slug(prompt));
            if dir.is_dir() {
                masks_in(&dir, MaskKind::HandsStart)?
            } else {
                Vec::new()
            }
        }
        _ => classical::keyed_hands(img, prompt, &cfg.classical),
    };
    check_sizes(Adapter::Hands, img, &masks)?;
    Ok(masks.into_iter().filter(|m| !m.is_empty()).collect())
}

/// Union mask of both arms (possibly empty).
pub fn arm_masks(frame: &RgbImage, cfg: &PerceptionConfig) -> Result<SpatialMask> {
    let mask = match cfg.resolve(Adapter::Arms) {
        AdapterMode::Fixture => {
            let path = cfg.fixture_dir(Adapter::Arms, &pixel_hash(frame)).join("mask.png");
            load_mask(&require(Adapter::Arms, path)?, MaskKind::ArmsStart)?
        }
        AdapterMode::Command => {
            let (_work, out) = image_command(cfg, Adapter::Arms, frame)?;
            load_mask(&out.join("mask.png"), MaskKind::ArmsStart)?
        }
        _ => classical::keyed_arms(frame, &cfg.classical),
    };
    check_sizes(Adapter::Arms, frame, std::slice::from_ref(&mask))?;
    Ok(mask)
}

fn check_sizes(adapter: Adapter, img: &RgbImage, masks: &[SpatialMask]) -> Result<()> {
    let want = (img.height() as usize, img.width() as usize);
    match masks.iter().find(|m| m.dim() != want) {
        Some(m) => Err(Error::Adapter { adapter: adapter.as_str(), reason: format!("mask {:?}, image {want:?}", m.dim()) }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub frames: Vec<FrameDetections>,
}

/// Index-fingertip tracks, one per hand found in enough frames of the stroke.
pub fn track_keypoints(video: &Video, bounds: &SignBoundaries, cfg: &PerceptionConfig) -> Result<Vec<KeypointTrack>> {
    SignBoundaries::new(bounds.start_frame, bounds.end_frame, bounds.source, video.len())?;
    let raw: Vec<FrameDetections> = match cfg.resolve(Adapter::Keypoints) {
        AdapterMode::Fixture => {
            let key = video.content_hash()?;
            let path = require(Adapter::Keypoints, cfg.fixture_dir(Adapter::Keypoints, &key).join("detections.json"))?;
            read_json::<DetectionsFile>(&path)?.frames
        }
        AdapterMode::Command => {
            let work = temp_work(Adapter::Keypoints)?;
            let out = run_command(cfg, Adapter::Keypoints, &video.dir, work.path())?;
            read_json::<DetectionsFile>(&out.join("detections.json"))?.frames
        }
        _ => {
            let mut frames = Vec::new();
            for i in bounds.start_frame..=bounds.end_frame {
                frames.push(FrameDetections { frame: i, detections: classical::markers(&video.frame(i)?, &cfg.classical) });
            }
            frames
        }
    };
    let in_range: Vec<FrameDetections> = raw
        .into_iter()
        .filter(|f| (bounds.start_frame..=bounds.end_frame).contains(&f.frame))
        .map(|mut f| {
            f.detections.retain(|d| d.confidence >= cfg.confidence_threshold);
            f
        })
        .collect();
    let (per_hand, nn) = pair_detections(&in_range);
    let mut tracks = Vec::new();
    for hand in [Hand::Left, Hand::Right] {
        let samples = per_hand.get(&hand).cloned().unwrap_or_default();
        if samples.is_empty() {
            continue;
        }
        let mut track = build_track(hand, &samples, bounds, cfg.max_gap);
        track.nn_paired = nn;
        if !track.samples.is_empty() {
            tracks.push(track);
        }
    }
    Ok(tracks)
}
