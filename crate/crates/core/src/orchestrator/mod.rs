//! End-to-end runs: segmentation, per-frame stylization, overlap check,
//! overlay (or skip), arrows. Every stage persists its artifacts under
//! `out/<run-id>/` and is cached by (stage, input hashes, config subset).

mod cache;
mod config;
mod manifest;
mod stages;
pub mod synthetic;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{file_hash, load_mask, load_rgb, pixel_hash, save_gray_png, save_png};
use crate::inversion::LatentTrajectory;
use crate::overlay::{hands_overlap, MaskKind};
use crate::perception::{segment_sign, Video};
use cache::{CacheEntry, StageCache};
use manifest::{artifacts, tree_hash};

pub use config::{PipelineConfig, CACHE_ENV};
pub use manifest::{Artifact, RunManifest, StageRecord, StageStatus};
pub use stages::{
    annotate, combine_frame_masks, crop_tracks, frame_masks, inversion_seed, load_boundaries, prepare_frame,
    save_boundaries, Annotation, Engine, FrameMasks, Role, Stylization, P,
};

pub const STAGES: [&str; 9] =
    ["segment", "edges", "style_inversion", "stylize_start", "stylize_end", "masks", "overlay", "arrows", "final"];

/// Short hash naming a run.
pub fn run_id(cfg: &PipelineConfig, video_hash: &str, style_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.content()).expect("config serializes"));
    h.update(video_hash.as_bytes());
    h.update(style_hash.as_bytes());
    hex::encode(h.finalize())[..12].to_string()
}

fn lazy_engine<'a>(cell: &'a OnceCell<Engine>, cfg: &PipelineConfig) -> Result<&'a Engine> {
    if cell.get().is_none() {
        let _ = cell.set(Engine::new(cfg)?);
    }
    Ok(cell.get().expect("engine initialized"))
}

enum Outcome {
    Done,
    Skipped(String),
}

struct Runner {
    run_dir: PathBuf,
    cache: Option<StageCache>,
    manifest: RunManifest,
}

impl Runner {
    fn save(&self) -> Result<()> {
        self.manifest.save(&self.run_dir.join("manifest.json"))
    }

    fn fail(&mut self, name: &str, started: Instant, passes: u64, err: Error) -> Error {
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Failed,
            cache_key: None,
            artifacts: Vec::new(),
            wall_time_ms: started.elapsed().as_millis() as u64,
            denoise_passes: passes,
            note: None,
            error: Some(err.to_string()),
        });
        if let Err(e) = self.save() {
            log::error!("could not write manifest: {e}");
        }
        Error::stage(name, err)
    }

    /// Runs or restores one stage. `outputs` are paths relative to the run
    /// directory; `inputs` are content hashes of everything the stage reads.
    fn stage<C: Serialize>(
        &mut self,
        name: &str,
        inputs: &[(&str, String)],
        config: &C,
        outputs: &[&str],
        passes: &dyn Fn() -> u64,
        body: impl FnOnce(&Path) -> Result<Outcome>,
    ) -> Result<()> {
        let started = Instant::now();
        let p0 = passes();
        let key = {
            let mut h = Sha256::new();
            h.update(name.as_bytes());
            h.update(serde_json::to_vec(&json!({ "inputs": inputs, "config": config })).map_err(|e| Error::json(name, e))?);
            hex::encode(h.finalize())
        };
        let _lock = match &self.cache {
            Some(c) => Some(c.lock(&key)?),
            None => None,
        };
        if let Some(c) = &self.cache {
            if let Some(entry) = c.restore(&key, &self.run_dir)? {
                log::info!("stage {name}: cache hit");
                let status = if entry.status == StageStatus::Skipped { StageStatus::Skipped } else { StageStatus::Cached };
                self.manifest.stages.push(StageRecord {
                    name: name.into(),
                    status,
                    cache_key: Some(key),
                    artifacts: entry.artifacts,
                    wall_time_ms: started.elapsed().as_millis() as u64,
                    denoise_passes: passes() - p0,
                    note: None,
                    error: None,
                });
                return self.save();
            }
        }
        log::info!("stage {name}: running");
        for o in outputs {
            let p = self.run_dir.join(o);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            } else if p.is_file() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let outcome = match body(&self.run_dir) {
            Ok(o) => o,
            Err(e) => return Err(self.fail(name, started, passes() - p0, e)),
        };
        let (status, note) = match outcome {
            Outcome::Done => (StageStatus::Completed, None),
            Outcome::Skipped(why) => (StageStatus::Skipped, Some(why)),
        };
        let rels: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
        let arts = artifacts(&self.run_dir, &rels)?;
        if status == StageStatus::Completed {
            let missing: Vec<&str> =
                outputs.iter().copied().filter(|o| !arts.iter().any(|a| a.path == *o || a.path.starts_with(&format!("{o}/")))).collect();
            if !missing.is_empty() {
                let err = Error::Validation(format!("stage did not produce {}", missing.join(", ")));
                return Err(self.fail(name, started, passes() - p0, err));
            }
        }
        if let Some(c) = &self.cache {
            c.store(&key, &self.run_dir, &CacheEntry { status, artifacts: arts.clone() })?;
        }
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status,
            cache_key: Some(key),
            artifacts: arts,
            wall_time_ms: started.elapsed().as_millis() as u64,
            denoise_passes: passes() - p0,
            note,
            error: None,
        });
        self.save()
    }

    fn skip(&mut self, name: &str, why: &str) -> Result<()> {
        log::info!("stage {name}: skipped ({why})");
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Skipped,
            cache_key: None,
            artifacts: Vec::new(),
            wall_time_ms: 0,
            denoise_passes: 0,
            note: Some(why.into()),
            error: None,
        });
        self.save()
    }
}

fn load_traj(dir: &Path) -> Result<LatentTrajectory<P>> {
    LatentTrajectory::load(dir)
}

/// Runs every stage for `video` (a directory of frames) and `style_image`.
/// Completed stages are restored from the cache; a rerun after a failure
/// resumes at the first failed or stale stage.
pub fn run_pipeline(video_dir: &Path, style_image: &Path, cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let video = Video::open(video_dir)?;
    let style = load_rgb(style_image)?;
    let video_hash = video.content_hash()?;
    let style_hash = pixel_hash(&style);
    let id = cfg.run_id.clone().unwrap_or_else(|| run_id(cfg, &video_hash, &style_hash));
    let run_dir = cfg.output_dir.join(&id);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let cache = if cfg.use_cache { Some(StageCache::new(cfg.cache_root())?) } else { None };
    log::info!("run {id} in {}", run_dir.display());

    let mut r = Runner {
        run_dir: run_dir.clone(),
        cache,
        manifest: RunManifest {
            run_id: id,
            config: cfg.clone(),
            inputs: BTreeMap::from([("video".to_string(), video_hash.clone()), ("style".to_string(), style_hash.clone())]),
            stages: Vec::new(),
            overlap_skipped: false,
            final_image: None,
        },
    };
    let cell: OnceCell<Engine> = OnceCell::new();
    let passes = || cell.get().map_or(0, Engine::forward_passes);
    let backbone = json!({ "backbone": cfg.backbone, "steps": cfg.steps, "seed": cfg.seed, "prompt": cfg.style.prompt });

    r.stage(
        "segment",
        &[("video", video_hash.clone())],
        &json!({ "perception": cfg.perception, "start": cfg.start_frame, "end": cfg.end_frame }),
        &["boundaries.json"],
        &passes,
        |dir| {
            let b = segment_sign(&video, cfg.start_frame, cfg.end_frame, &cfg.perception)?;
            save_boundaries(&dir.join("boundaries.json"), &b)?;
            Ok(Outcome::Done)
        },
    )?;

    let edge_outputs = ["edges/frame_start.png", "edges/frame_end.png", "edges/start.png", "edges/end.png"];
    r.stage(
        "edges",
        &[("video", video_hash.clone()), ("boundaries", tree_hash(&run_dir, &["boundaries.json"])?)],
        &json!({ "perception": cfg.perception, "backbone": cfg.backbone }),
        &edge_outputs,
        &passes,
        |dir| {
            let size = lazy_engine(&cell, cfg)?.image_size();
            let b = load_boundaries(&dir.join("boundaries.json"))?;
            for (role, i) in [(Role::Start, b.start_frame), (Role::End, b.end_frame)] {
                let (frame, edges) = prepare_frame(&video.frame(i)?, size, &cfg.perception)?;
                save_png(&dir.join(format!("edges/frame_{role}.png")), &frame)?;
                save_gray_png(&dir.join(format!("edges/{role}.png")), &edges)?;
            }
            Ok(Outcome::Done)
        },
    )?;

    r.stage(
        "style_inversion",
        &[("style", style_hash.clone())],
        &json!({ "backbone": backbone, "guidance": cfg.style.guidance_scale }),
        &["trajectories/style"],
        &passes,
        |dir| {
            let traj = lazy_engine(&cell, cfg)?.invert_style(&style)?;
            traj.save(&dir.join("trajectories/style"))?;
            Ok(Outcome::Done)
        },
    )?;

    for role in [Role::Start, Role::End] {
        let frame_rel = format!("edges/frame_{role}.png");
        let edges_rel = format!("edges/{role}.png");
        let outs = [
            format!("illustrations/{role}.png"),
            format!("trajectories/{role}_image"),
            format!("trajectories/{role}_edges"),
            format!("trajectories/{role}_illustration"),
        ];
        let out_refs: Vec<&str> = outs.iter().map(String::as_str).collect();
        r.stage(
            &format!("stylize_{role}"),
            &[
                ("frame", tree_hash(&run_dir, &[&frame_rel])?),
                ("edges", tree_hash(&run_dir, &[&edges_rel])?),
                ("style", tree_hash(&run_dir, &["trajectories/style"])?),
            ],
            &json!({
                "backbone": backbone,
                "role": role,
                "style": cfg.style,
                "illustration_guidance": cfg.overlay.effective_guidance(),
            }),
            &out_refs,
            &passes,
            |dir| {
                let engine = lazy_engine(&cell, cfg)?;
                let frame = load_rgb(&dir.join(&frame_rel))?;
                let edges = image::open(dir.join(&edges_rel))
                    .map_err(|source| Error::Image { path: dir.join(&edges_rel), source })?
                    .to_luma8();
                let style_traj = load_traj(&dir.join("trajectories/style"))?;
                let s = engine.stylize(&frame, &edges, &style_traj, role)?;
                save_png(&dir.join(&outs[0]), &s.illustration)?;
                s.traj_image.save(&dir.join(&outs[1]))?;
                s.traj_edges.save(&dir.join(&outs[2]))?;
                s.traj_illustration.save(&dir.join(&outs[3]))?;
                Ok(Outcome::Done)
            },
        )?;
    }

    r.stage(
        "masks",
        &[("frames", tree_hash(&run_dir, &["edges/frame_start.png", "edges/frame_end.png"])?)],
        &json!({
            "perception": cfg.perception,
            "backbone": cfg.backbone,
            "downsample": cfg.overlay.mask_downsample_rule,
            "dilation": cfg.overlay.dilation_radius,
        }),
        &["masks"],
        &passes,
        |dir| {
            let latent = lazy_engine(&cell, cfg)?.latent_size();
            let mut combined = Vec::new();
            for role in [Role::Start, Role::End] {
                let frame = load_rgb(&dir.join(format!("edges/frame_{role}.png")))?;
                let m = frame_masks(&frame, role, latent, &cfg.perception, &cfg.overlay)?;
                m.save(&dir.join("masks"), role)?;
                combined.push(m.combined);
            }
            let overlap = hands_overlap(&combined[0], &combined[1]);
            let path = dir.join("masks/overlap.json");
            std::fs::write(&path, json!({ "overlap": overlap }).to_string()).map_err(|e| Error::io(&path, e))?;
            Ok(Outcome::Done)
        },
    )?;

    let m1 = load_mask(&run_dir.join("masks/combined_start.png"), MaskKind::CombinedStart)?;
    let m2 = load_mask(&run_dir.join("masks/combined_end.png"), MaskKind::CombinedEnd)?;
    let overlap = hands_overlap(&m1, &m2);
    if cfg.skip_overlay {
        r.skip("overlay", "disabled by configuration")?;
    } else if overlap {
        log::warn!("start and end hand masks overlap; using the start illustration");
        r.manifest.overlap_skipped = true;
        r.skip("overlay", "hand masks overlap")?;
    } else {
        r.stage(
            "overlay",
            &[
                ("illustration_1", tree_hash(&run_dir, &["trajectories/start_illustration"])?),
                ("illustration_2", tree_hash(&run_dir, &["trajectories/end_illustration"])?),
                ("masks", tree_hash(&run_dir, &["masks/combined_start.png", "masks/combined_end.png"])?),
            ],
            &json!({ "backbone": backbone, "overlay": cfg.overlay }),
            &["overlay/overlay.png"],
            &passes,
            |dir| {
                let t1 = load_traj(&dir.join("trajectories/start_illustration"))?;
                let t2 = load_traj(&dir.join("trajectories/end_illustration"))?;
                match lazy_engine(&cell, cfg)?.overlay(&t1, &t2, &m1, &m2) {
                    Ok(out) => {
                        save_png(&dir.join("overlay/overlay.png"), &out.image)?;
                        Ok(Outcome::Done)
                    }
                    Err(Error::OverlapSkip) => Ok(Outcome::Skipped("hand masks overlap".into())),
                    Err(e) => Err(e),
                }
            },
        )?;
    }

    let base_rel = if run_dir.join("overlay/overlay.png").is_file() && !r.manifest.overlap_skipped && !cfg.skip_overlay {
        "overlay/overlay.png"
    } else {
        "illustrations/start.png"
    };
    if cfg.no_arrows {
        r.skip("arrows", "disabled by configuration")?;
    } else {
        r.stage(
            "arrows",
            &[
                ("video", video_hash.clone()),
                ("boundaries", tree_hash(&run_dir, &["boundaries.json"])?),
                ("base", tree_hash(&run_dir, &[base_rel])?),
            ],
            &json!({ "perception": cfg.perception, "arrows": cfg.arrows }),
            &["arrows"],
            &passes,
            |dir| {
                let b = load_boundaries(&dir.join("boundaries.json"))?;
                let base = load_rgb(&dir.join(base_rel))?;
                annotate(&video, &b, &base, &cfg.perception, &cfg.arrows)?.save(&dir.join("arrows"))?;
                Ok(Outcome::Done)
            },
        )?;
    }

    let final_src = if cfg.no_arrows { base_rel } else { "arrows/annotated.png" };
    let started = Instant::now();
    let final_path = run_dir.join("final.png");
    if let Err(e) = std::fs::copy(run_dir.join(final_src), &final_path) {
        return Err(r.fail("final", started, 0, Error::io(&final_path, e)));
    }
    let art = Artifact { path: "final.png".into(), sha256: file_hash(&final_path)? };
    r.manifest.stages.push(StageRecord {
        name: "final".into(),
        status: StageStatus::Completed,
        cache_key: None,
        artifacts: vec![art.clone()],
        wall_time_ms: started.elapsed().as_millis() as u64,
        denoise_passes: 0,
        note: Some(format!("from {final_src}")),
        error: None,
    });
    r.manifest.final_image = Some(art);
    r.save()?;
    Ok(r.manifest)
}
