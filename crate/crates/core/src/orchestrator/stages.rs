//! Stage computations shared by the pipeline runner and the stage-level CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::backbone::{build_backbone, Denoiser, PromptEmbedding};
use crate::error::{Error, Result};
use crate::imaging::{fit_square, gray_to_rgb, save_mask};
use crate::inversion::{invert, LatentTrajectory, SourceTag};
use crate::overlay::{combine_masks, MaskKind, OverlayConfig, OverlayOutput, SpatialMask};
use crate::perception::{arm_masks, extract_edges, hand_masks, track_keypoints, KeypointTrack, PerceptionConfig, SignBoundaries, Video};
use crate::style::stylize_frame;
use crate::trajectory::{arrows_for_tracks, composite, ArrowConfig, ArrowDocument};

/// Scalar used by pipeline runs; trajectories persist as float32 so runs and
/// chained stage commands see identical values.
pub type P = f32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Start,
    End,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Start => "start",
            Role::End => "end",
        }
    }

    pub fn illustration_tag(self) -> SourceTag {
        match self {
            Role::Start => SourceTag::Illustration1,
            Role::End => SourceTag::Illustration2,
        }
    }

    fn salt(self) -> u64 {
        match self {
            Role::Start => 1,
            Role::End => 2,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(Role::Start),
            "end" => Ok(Role::End),
            _ => Err(Error::Validation(format!("role must be `start` or `end`, got `{s}`"))),
        }
    }
}

/// Inversion seed for a source; style inversions pass `None`.
pub fn inversion_seed(seed: u64, tag: SourceTag, role: Option<Role>) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag.seed_offset() << 8) ^ role.map_or(0, Role::salt)
}

/// Frame cropped to the backbone resolution plus its edge map.
pub fn prepare_frame(frame: &RgbImage, size: u32, perception: &PerceptionConfig) -> Result<(RgbImage, GrayImage)> {
    let fitted = fit_square(frame, size);
    let edges = extract_edges(&fitted, perception)?;
    Ok((fitted, edges))
}

pub struct Stylization {
    pub illustration: RgbImage,
    pub traj_image: LatentTrajectory<P>,
    pub traj_edges: LatentTrajectory<P>,
    /// Inversion of the illustration, consumed by the overlay.
    pub traj_illustration: LatentTrajectory<P>,
}

/// A backbone with the run prompt embedded.
pub struct Engine {
    handle: Box<dyn Denoiser<P>>,
    prompt: PromptEmbedding<P>,
    cfg: PipelineConfig,
}

impl Engine {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let handle = build_backbone::<P>(&cfg.backbone)?;
        let prompt = handle.embed_prompt(&cfg.style.prompt)?;
        Ok(Engine { handle, prompt, cfg: cfg.clone() })
    }

    pub fn handle(&self) -> &dyn Denoiser<P> {
        self.handle.as_ref()
    }

    pub fn image_size(&self) -> u32 {
        self.handle.info().image_size as u32
    }

    pub fn latent_size(&self) -> usize {
        self.handle.info().latent_size
    }

    pub fn forward_passes(&self) -> u64 {
        self.handle.forward_passes()
    }

    fn invert_image(&self, img: &RgbImage, tag: SourceTag, role: Option<Role>, guidance: f64) -> Result<LatentTrajectory<P>> {
        let fitted = fit_square(img, self.image_size());
        let latent = self.handle.encode(&fitted)?;
        let seed = inversion_seed(self.cfg.seed, tag, role);
        invert(self.handle(), &latent, self.cfg.steps, &self.prompt, guidance as P, seed, tag)
    }

    pub fn invert_style(&self, style: &RgbImage) -> Result<LatentTrajectory<P>> {
        self.invert_image(style, SourceTag::Style, None, self.cfg.style.guidance_scale)
    }

    /// Stylizes a prepared frame and inverts the result for the overlay.
    pub fn stylize(&self, frame: &RgbImage, edges: &GrayImage, style: &LatentTrajectory<P>, role: Role) -> Result<Stylization> {
        let g = self.cfg.style.guidance_scale;
        let traj_image = self.invert_image(frame, SourceTag::Img, Some(role), g)?;
        let traj_edges = self.invert_image(&gray_to_rgb(edges), SourceTag::Edges, Some(role), g)?;
        let out = stylize_frame(self.handle(), &traj_image, &traj_edges, style, &self.prompt, &self.cfg.style)?;
        let traj_illustration =
            self.invert_image(&out.image, role.illustration_tag(), Some(role), self.cfg.overlay.effective_guidance())?;
        Ok(Stylization { illustration: out.image, traj_image, traj_edges, traj_illustration })
    }

    pub fn overlay(
        &self,
        traj_1: &LatentTrajectory<P>,
        traj_2: &LatentTrajectory<P>,
        m1: &SpatialMask,
        m2: &SpatialMask,
    ) -> Result<OverlayOutput<P>> {
        crate::overlay::run_overlay(self.handle(), traj_1, traj_2, m1, m2, &self.prompt, &self.cfg.overlay)
    }
}

/// Pixel-resolution hand and arm masks of one frame and their combination
/// on the latent grid.
#[derive(Debug, Clone)]
pub struct FrameMasks {
    pub hands: SpatialMask,
    pub arms: SpatialMask,
    pub combined: SpatialMask,
}

impl FrameMasks {
    pub fn save(&self, dir: &Path, role: Role) -> Result<()> {
        save_mask(&dir.join(format!("hands_{role}.png")), &self.hands)?;
        save_mask(&dir.join(format!("arms_{role}.png")), &self.arms)?;
        save_mask(&dir.join(format!("combined_{role}.png")), &self.combined)
    }
}

fn kinds(role: Role) -> (MaskKind, MaskKind, MaskKind) {
    match role {
        Role::Start => (MaskKind::HandsStart, MaskKind::ArmsStart, MaskKind::CombinedStart),
        Role::End => (MaskKind::HandsEnd, MaskKind::ArmsEnd, MaskKind::CombinedEnd),
    }
}

/// Combines given pixel masks for `role`.
pub fn combine_frame_masks(
    hands: SpatialMask,
    arms: SpatialMask,
    role: Role,
    latent_size: usize,
    overlay: &OverlayConfig,
) -> Result<FrameMasks> {
    let (hk, ak, ck) = kinds(role);
    let combined = combine_masks(std::slice::from_ref(&hands), std::slice::from_ref(&arms), latent_size, overlay, ck)?;
    Ok(FrameMasks { hands: hands.with_kind(hk), arms: arms.with_kind(ak), combined })
}

/// Masks of a prepared frame from the hand and arm adapters.
pub fn frame_masks(
    frame: &RgbImage,
    role: Role,
    latent_size: usize,
    perception: &PerceptionConfig,
    overlay: &OverlayConfig,
) -> Result<FrameMasks> {
    let (h, w) = (frame.height() as usize, frame.width() as usize);
    let mut hands = SpatialMask::empty(h, w, MaskKind::HandsStart);
    for m in hand_masks(frame, &perception.hands_prompt, perception)? {
        hands.values.zip_mut_with(&m.values, |a, &b| *a = a.max(b));
    }
    let arms = arm_masks(frame, perception)?;
    combine_frame_masks(hands, arms, role, latent_size, overlay)
}

/// Re-expresses tracks normalized to the source frame in the coordinates of
/// its centered square crop.
pub fn crop_tracks(tracks: &[KeypointTrack], width: u32, height: u32) -> Vec<KeypointTrack> {
    let (w, h) = (width as f64, height as f64);
    let side = w.min(h);
    let (ox, oy) = (((width - width.min(height)) / 2) as f64, ((height - width.min(height)) / 2) as f64);
    tracks
        .iter()
        .map(|t| KeypointTrack {
            samples: t.samples.iter().map(|&(f, x, y)| (f, (x * w - ox) / side, (y * h - oy) / side)).collect(),
            ..t.clone()
        })
        .collect()
}

pub struct Annotation {
    pub tracks: Vec<KeypointTrack>,
    pub arrows: ArrowDocument,
    pub image: RgbImage,
}

impl Annotation {
    /// Writes `keypoints_<hand>.json`, `arrows.svg` and `annotated.png` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in &self.tracks {
            t.save(&dir.join(format!("keypoints_{}.json", t.hand.as_str())))?;
        }
        let svg = dir.join("arrows.svg");
        std::fs::write(&svg, self.arrows.to_svg()).map_err(|e| Error::io(&svg, e))?;
        crate::imaging::save_png(&dir.join("annotated.png"), &self.image)
    }
}

/// Tracks fingertips over the stroke and draws their arrows on `base`.
pub fn annotate(
    video: &Video,
    bounds: &SignBoundaries,
    base: &RgbImage,
    perception: &PerceptionConfig,
    arrows: &ArrowConfig,
) -> Result<Annotation> {
    let raw = track_keypoints(video, bounds, perception)?;
    let first = video.frame(bounds.start_frame)?;
    let tracks = crop_tracks(&raw, first.width(), first.height());
    let doc = arrows_for_tracks(&tracks, arrows, base.width(), base.height())?;
    let image = composite(base, &doc)?;
    Ok(Annotation { tracks, arrows: doc, image })
}

pub fn save_boundaries(path: &Path, b: &SignBoundaries) -> Result<()> {
    crate::imaging::ensure_parent(path)?;
    let json = serde_json::to_string_pretty(b).map_err(|e| Error::json("boundaries", e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_boundaries(path: &Path) -> Result<SignBoundaries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::Hand;

    #[test]
    fn crop_mapping() {
        let t = KeypointTrack { hand: Hand::Left, samples: vec![(0, 0.5, 0.5), (1, 0.25, 0.0)], nn_paired: false };
        let c = crop_tracks(&[t], 200, 100);
        assert_eq!(c[0].samples[0], (0, 0.5, 0.5));
        assert_eq!(c[0].samples[1], (1, 0.0, 0.0));
    }

    #[test]
    fn seeds_differ_by_source() {
        let a = inversion_seed(3, SourceTag::Img, Some(Role::Start));
        assert_ne!(a, inversion_seed(3, SourceTag::Img, Some(Role::End)));
        assert_ne!(a, inversion_seed(3, SourceTag::Edges, Some(Role::Start)));
        assert_ne!(a, inversion_seed(4, SourceTag::Img, Some(Role::Start)));
        assert_eq!("end".parse::<Role>().unwrap(), Role::End);
        assert!("middle".parse::<Role>().is_err());
    }
}
