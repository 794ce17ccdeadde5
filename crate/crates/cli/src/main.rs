//! `illusign`: sign illustrations from video, end to end or one stage at a time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use illusign_core::evaluation::{evaluate_dirs, write_report, EvalContext, RandomConvFeatures};
use illusign_core::imaging::{load_mask, load_rgb, save_gray_png, save_png};
use illusign_core::inversion::LatentTrajectory;
use illusign_core::orchestrator::{
    annotate, combine_frame_masks, frame_masks, load_boundaries, prepare_frame, run_pipeline, save_boundaries,
    Engine, PipelineConfig, Role, RunManifest, P,
};
use illusign_core::overlay::{hands_overlap, MaskKind};
use illusign_core::perception::{segment_sign, Video};
use illusign_core::Error;

#[derive(Parser)]
#[command(name = "illusign", version, about = "Sketch illustrations of signs from video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (JSON); defaults apply to omitted fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        Ok(match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        })
    }
}

#[derive(Args)]
struct StyleOverrides {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Attention contrast
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    guidance: Option<f64>,
    /// Injection window, `lo:hi` or `none`
    #[arg(long)]
    window: Option<String>,
}

impl StyleOverrides {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        let s = &mut cfg.style;
        s.gamma = self.gamma.unwrap_or(s.gamma);
        s.delta = self.delta.unwrap_or(s.delta);
        s.beta_contrast = self.beta.unwrap_or(s.beta_contrast);
        s.guidance_scale = self.guidance.unwrap_or(s.guidance_scale);
        if let Some(w) = &self.window {
            s.injection_window = w.parse().map_err(Error::Validation)?;
        }
        Ok(cfg.validate()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline
    #[command(alias = "pipeline")]
    Run {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        end: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        skip_overlay: bool,
        #[arg(long)]
        no_arrows: bool,
        #[arg(long)]
        no_cache: bool,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Start and end frames of the sign stroke
    Segment {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        end: Option<usize>,
        /// boundaries.json to write
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Stylize one frame: writes frame.png, edges.png, illustration.png, trajectory/
    Stylize {
        #[arg(long, alias = "image", required_unless_present = "video")]
        frame: Option<PathBuf>,
        /// Take the frame from a video at the role's boundary
        #[arg(long, requires = "boundaries", conflicts_with = "frame")]
        video: Option<PathBuf>,
        #[arg(long)]
        boundaries: Option<PathBuf>,
        #[arg(long)]
        style: PathBuf,
        #[arg(long, default_value = "start")]
        role: String,
        /// Precomputed edge map instead of the extracted one
        #[arg(long)]
        edges: Option<PathBuf>,
        #[command(flatten)]
        overrides: StyleOverrides,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Overlay two stylize outputs: writes overlay.png, masks/, overlay.json
    Overlay {
        #[arg(long, alias = "ill1")]
        start: PathBuf,
        #[arg(long, alias = "ill2")]
        end: PathBuf,
        #[arg(long, alias = "hands1", requires = "arms_start")]
        hands_start: Option<PathBuf>,
        #[arg(long, alias = "hands2", requires = "arms_end")]
        hands_end: Option<PathBuf>,
        #[arg(long, alias = "arms1", requires = "hands_start")]
        arms_start: Option<PathBuf>,
        #[arg(long, alias = "arms2", requires = "hands_end")]
        arms_end: Option<PathBuf>,
        #[arg(long)]
        quantile: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fingertip arrows: writes keypoints_<hand>.json, arrows.svg, annotated.png
    Arrows {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        boundaries: Option<PathBuf>,
        #[arg(long, required_unless_present = "run", conflicts_with = "run")]
        image: Option<PathBuf>,
        /// Annotate a run's overlay, or its start illustration when the overlay was skipped
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Style and hand-shape metrics against ground-truth illustrations
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "illusign")]
        method: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Print the default config
    Config,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

fn stylize_frame_source(frame: Option<PathBuf>, video: Option<PathBuf>, boundaries: Option<PathBuf>, role: Role) -> Result<image::RgbImage> {
    if let Some(f) = frame {
        return Ok(load_rgb(&f)?);
    }
    let (Some(v), Some(b)) = (video, boundaries) else { return Err(invalid("pass --frame or --video with --boundaries")) };
    let video = Video::open(&v)?;
    let b = load_boundaries(&b)?;
    Ok(video.frame(if role == Role::Start { b.start_frame } else { b.end_frame })?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { video, style, out, run_id, start, end, seed, steps, skip_overlay, no_arrows, no_cache, config } => {
            let mut cfg = config.load()?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.run_id = run_id.or(cfg.run_id);
            cfg.start_frame = start.or(cfg.start_frame);
            cfg.end_frame = end.or(cfg.end_frame);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.skip_overlay |= skip_overlay;
            cfg.no_arrows |= no_arrows;
            cfg.use_cache &= !no_cache;
            let m = run_pipeline(&video, &style, &cfg)?;
            let dir = cfg.output_dir.join(&m.run_id);
            if m.overlap_skipped {
                println!("hand masks overlap; overlay skipped");
            }
            println!("{}", dir.join("final.png").display());
        }
        Command::Segment { video, start, end, out, config } => {
            let cfg = config.load()?;
            let b = segment_sign(&Video::open(&video)?, start, end, &cfg.perception)?;
            save_boundaries(&out, &b)?;
            println!("{} {}", b.start_frame, b.end_frame);
        }
        Command::Stylize { frame, video, boundaries, style, role, edges, overrides, out, config } => {
            let mut cfg = config.load()?;
            overrides.apply(&mut cfg)?;
            let role: Role = role.parse()?;
            let src = stylize_frame_source(frame, video, boundaries, role)?;
            let engine = Engine::new(&cfg)?;
            let size = engine.image_size();
            let (frame, mut extracted) = prepare_frame(&src, size, &cfg.perception)?;
            if let Some(p) = edges {
                let img = image::open(&p).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?.to_luma8();
                extracted = image::imageops::resize(&img, size, size, image::imageops::FilterType::Triangle);
            }
            let edges = extracted;
            let style_traj = engine.invert_style(&load_rgb(&style)?)?;
            let s = engine.stylize(&frame, &edges, &style_traj, role)?;
            save_png(&out.join("frame.png"), &frame)?;
            save_gray_png(&out.join("edges.png"), &edges)?;
            save_png(&out.join("illustration.png"), &s.illustration)?;
            s.traj_illustration.save(&out.join("trajectory"))?;
            println!("{}", out.join("illustration.png").display());
        }
        Command::Overlay { start, end, hands_start, hands_end, arms_start, arms_end, quantile, out, config } => {
            let mut cfg = config.load()?;
            if let Some(q) = quantile {
                cfg.overlay.quantile = q;
            }
            let engine = Engine::new(&cfg)?;
            let latent = engine.latent_size();
            let masks_for = |dir: &Path, role: Role, hands: Option<PathBuf>, arms: Option<PathBuf>| -> Result<_> {
                Ok(match (hands, arms) {
                    (Some(h), Some(a)) => combine_frame_masks(
                        load_mask(&h, MaskKind::HandsStart)?,
                        load_mask(&a, MaskKind::ArmsStart)?,
                        role,
                        latent,
                        &cfg.overlay,
                    )?,
                    _ => frame_masks(&load_rgb(&dir.join("frame.png"))?, role, latent, &cfg.perception, &cfg.overlay)?,
                })
            };
            let m1 = masks_for(&start, Role::Start, hands_start, arms_start)?;
            let m2 = masks_for(&end, Role::End, hands_end, arms_end)?;
            m1.save(&out.join("masks"), Role::Start)?;
            m2.save(&out.join("masks"), Role::End)?;
            let skipped = hands_overlap(&m1.combined, &m2.combined);
            std::fs::write(out.join("overlay.json"), serde_json::json!({ "overlap_skipped": skipped }).to_string())
                .with_context(|| format!("writing {}", out.display()))?;
            if skipped {
                println!("hand masks overlap; overlay skipped");
                return Ok(());
            }
            let t1 = LatentTrajectory::<P>::load(&start.join("trajectory"))?;
            let t2 = LatentTrajectory::<P>::load(&end.join("trajectory"))?;
            let o = engine.overlay(&t1, &t2, &m1.combined, &m2.combined)?;
            save_png(&out.join("overlay.png"), &o.image)?;
            println!("{}", out.join("overlay.png").display());
        }
        Command::Arrows { video, boundaries, image, run, out, config } => {
            let cfg = config.load()?;
            let (base, bounds) = match (image, run) {
                (Some(img), _) => {
                    let b = boundaries.ok_or_else(|| invalid("--image needs --boundaries"))?;
                    (img, b)
                }
                (None, Some(run)) => {
                    let m = RunManifest::load(&run.join("manifest.json"))?;
                    let overlay = run.join("overlay/overlay.png");
                    let base = if !m.overlap_skipped && overlay.is_file() {
                        overlay
                    } else {
                        log::info!("no overlay in {}; annotating the start illustration", run.display());
                        run.join("illustrations/start.png")
                    };
                    (base, boundaries.unwrap_or_else(|| run.join("boundaries.json")))
                }
                (None, None) => return Err(invalid("pass --image or --run")),
            };
            let a = annotate(&Video::open(&video)?, &load_boundaries(&bounds)?, &load_rgb(&base)?, &cfg.perception, &cfg.arrows)?;
            a.save(&out)?;
            println!("{}", out.join("annotated.png").display());
        }
        Command::Eval { pred, gt, frames, out, method, config } => {
            let cfg = config.load()?;
            let extractor = RandomConvFeatures::default();
            let ctx = EvalContext { extractor: &extractor, scorers: cfg.scorers.clone(), perception: cfg.perception.clone() };
            let records = evaluate_dirs(&ctx, &pred, &gt, &frames)?;
            write_report(&records, &out, &method)?;
            println!("{}", out.join("report.md").display());
        }
        Command::Config => println!("{}", PipelineConfig::default().to_json()),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(|e| e.downcast_ref::<Error>()).map_or(4, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
