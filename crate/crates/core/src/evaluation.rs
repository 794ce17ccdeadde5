//! Metric harness: style metrics (Gram distance, LPIPS, CLIP score) against
//! ground-truth illustrations and hand-mask mIOU against source frames.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{fit_square, load_rgb, pixel_hash, save_png};
use crate::overlay::{MaskKind, SpatialMask};
use crate::perception::{hand_masks, AdapterMode, PerceptionConfig, FIXTURES_ENV};

/// Maps an image to feature maps, each `[channels, positions]`.
pub trait FeatureExtractor {
    fn features(&self, img: &RgbImage) -> Result<Vec<Array2<f64>>>;
}

/// Seeded random 3x3 convolutions with ReLU and 2x average pooling between
/// layers, on a resized square input.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    pub input_size: u32,
    layers: Vec<Array3<f64>>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, channels: &[usize], input_size: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut layers = Vec::new();
        for &c in channels {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let d = Normal::new(0.0, std).unwrap();
            layers.push(Array3::from_shape_simple_fn((c, cin, 9), || d.sample(&mut rng)));
            cin = c;
        }
        RandomConvFeatures { input_size, layers }
    }
}

impl Default for RandomConvFeatures {
    fn default() -> Self {
        RandomConvFeatures::new(0x5eed, &[8, 16, 32], 64)
    }
}

fn conv_relu(x: &Array3<f64>, w: &Array3<f64>) -> Array3<f64> {
    let (_, h, wd) = x.dim();
    let (cout, cin, _) = w.dim();
    let mut out = Array3::zeros((cout, h, wd));
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for i in 0..cin {
                    for k in 0..9 {
                        let (yy, xk) = (y as isize + (k / 3) as isize - 1, xx as isize + (k % 3) as isize - 1);
                        if yy >= 0 && xk >= 0 && (yy as usize) < h && (xk as usize) < wd {
                            acc += w[[o, i, k]] * x[[i, yy as usize, xk as usize]];
                        }
                    }
                }
                out[[o, y, xx]] = acc.max(0.0);
            }
        }
    }
    out
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, (h / 2).max(1), (w / 2).max(1)), |(k, y, xx)| {
        let mut s = 0.0;
        let mut n = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                if 2 * y + dy < h && 2 * xx + dx < w {
                    s += x[[k, 2 * y + dy, 2 * xx + dx]];
                    n += 1.0;
                }
            }
        }
        s / n
    })
}

impl FeatureExtractor for RandomConvFeatures {
    fn features(&self, img: &RgbImage) -> Result<Vec<Array2<f64>>> {
        let s = self.input_size;
        let img = if img.dimensions() == (s, s) { img.clone() } else { image::imageops::resize(img, s, s, FilterType::Triangle) };
        let mut x = Array3::from_shape_fn((3, s as usize, s as usize), |(c, y, xx)| {
            img.get_pixel(xx as u32, y as u32)[c] as f64 / 255.0 - 0.5
        });
        let mut out = Vec::new();
        for (i, w) in self.layers.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            x = conv_relu(&x, w);
            let (c, h, wd) = x.dim();
            out.push(x.to_shape((c, h * wd)).map_err(|e| Error::Shape(e.to_string()))?.to_owned());
        }
        Ok(out)
    }
}

/// `F Fᵀ / N` for a `[channels, positions]` feature map.
pub fn gram_matrix(f: &Array2<f64>) -> Array2<f64> {
    let n = f.ncols().max(1) as f64;
    f.dot(&f.t()) / n
}

/// Mean Frobenius distance between Gram matrices over the extractor's layers.
pub fn gram_distance(a: &RgbImage, b: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let (fa, fb) = (extractor.features(a)?, extractor.features(b)?);
    if fa.is_empty() || fa.len() != fb.len() {
        return Err(Error::Validation("feature extractor returned no or mismatched layers".into()));
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!("feature channels {} vs {}", x.nrows(), y.nrows())));
        }
        let d = gram_matrix(x) - gram_matrix(y);
        total += d.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(total / fa.len() as f64)
}

/// LPIPS-style distance without learned weights: squared difference of
/// channel-normalized features, averaged over positions and layers.
pub fn perceptual_distance(a: &RgbImage, b: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let (fa, fb) = (extractor.features(a)?, extractor.features(b)?);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        if x.dim() != y.dim() {
            return Err(Error::Shape(format!("feature maps {:?} vs {:?}", x.dim(), y.dim())));
        }
        let unit = |m: &Array2<f64>| {
            let mut m = m.clone();
            for mut col in m.axis_iter_mut(Axis(1)) {
                let n = col.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                col.mapv_inplace(|v| v / n);
            }
            m
        };
        let d = unit(x) - unit(y);
        total += d.iter().map(|v| v * v).sum::<f64>() / x.ncols() as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Cosine similarity of globally pooled deepest features, clamped to [0, 1].
pub fn embedding_similarity(a: &RgbImage, b: &RgbImage, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let pooled = |img: &RgbImage| -> Result<Vec<f64>> {
        let f = extractor.features(img)?;
        let last = f.last().ok_or_else(|| Error::Validation("no feature layers".into()))?;
        Ok(last.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default())
    };
    let (x, y) = (pooled(a)?, pooled(b)?);
    if x == y {
        return Ok(1.0);
    }
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nx * ny)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Lpips,
    Clip,
}

impl Scorer {
    fn as_str(self) -> &'static str {
        match self {
            Scorer::Lpips => "lpips",
            Scorer::Clip => "clip",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub mode: AdapterMode,
    pub fixtures_dir: PathBuf,
    pub lpips_command: Option<String>,
    pub clip_command: Option<String>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { mode: AdapterMode::Auto, fixtures_dir: PathBuf::from("fixtures"), lpips_command: None, clip_command: None }
    }
}

#[derive(Deserialize)]
struct ScoreFile {
    score: f64,
}

/// Scores a pair of images with an external scorer (fixture or command) or
/// the built-in feature proxy.
pub fn external_score(
    scorer: Scorer,
    a: &RgbImage,
    b: &RgbImage,
    cfg: &ScorerConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let command = match scorer {
        Scorer::Lpips => cfg.lpips_command.as_ref(),
        Scorer::Clip => cfg.clip_command.as_ref(),
    };
    let forced = std::env::var(FIXTURES_ENV).is_ok_and(|v| v == "1");
    let mode = match cfg.mode {
        _ if forced => AdapterMode::Fixture,
        AdapterMode::Auto if command.is_some() => AdapterMode::Command,
        AdapterMode::Auto => AdapterMode::Classical,
        m => m,
    };
    let read = |path: &Path| -> Result<f64> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: ScoreFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Ok(s.score)
    };
    match mode {
        AdapterMode::Fixture => {
            let path = cfg.fixtures_dir.join(scorer.as_str()).join(format!("{}_{}", pixel_hash(a), pixel_hash(b))).join("score.json");
            if !path.exists() {
                return Err(Error::FixtureMissing { adapter: scorer.as_str(), path });
            }
            read(&path)
        }
        AdapterMode::Command => {
            let cmd = command.ok_or_else(|| Error::Adapter { adapter: scorer.as_str(), reason: "no command configured".into() })?;
            let work = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            let input = work.path().join("in");
            let out = work.path().join("out");
            save_png(&input.join("a.png"), a)?;
            save_png(&input.join("b.png"), b)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut parts = cmd.split_whitespace();
            let prog = parts.next().ok_or_else(|| Error::Adapter { adapter: scorer.as_str(), reason: "empty command".into() })?;
            let status = Command::new(prog)
                .args(parts)
                .arg(&input)
                .arg(&out)
                .status()
                .map_err(|e| Error::Adapter { adapter: scorer.as_str(), reason: format!("{prog}: {e}") })?;
            if !status.success() {
                return Err(Error::Adapter { adapter: scorer.as_str(), reason: format!("{prog} exited with {status}") });
            }
            read(&out.join("score.json"))
        }
        _ => match scorer {
            Scorer::Lpips => perceptual_distance(a, b, extractor),
            Scorer::Clip => embedding_similarity(a, b, extractor),
        },
    }
}

/// Intersection over union; `None` when both masks are empty.
pub fn iou(pred: &SpatialMask, gt: &SpatialMask) -> Result<Option<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("iou: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values.iter().zip(gt.values.iter()) {
        let (p, g) = (p != 0.0, g != 0.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandPair {
    pub left: SpatialMask,
    pub right: SpatialMask,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MiouResult {
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub overall: Option<f64>,
    pub notes: Vec<String>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-hand IoU; a hand empty in both prediction and ground truth is excluded.
pub fn miou(pred: &HandPair, gt: &HandPair) -> Result<MiouResult> {
    let mut r = MiouResult { left: iou(&pred.left, &gt.left)?, right: iou(&pred.right, &gt.right)?, ..Default::default() };
    for (name, v) in [("left", r.left), ("right", r.right)] {
        if v.is_none() {
            r.notes.push(format!("{name} hand empty in prediction and ground truth; excluded"));
        }
    }
    r.overall = mean(&[r.left, r.right].into_iter().flatten().collect::<Vec<_>>());
    Ok(r)
}

fn rgb_to_hsv(p: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = p.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        f64::NAN
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, s, max)
}

pub fn is_arrow_orange(p: [u8; 3]) -> bool {
    let (h, s, v) = rgb_to_hsv(p);
    (15.0..=45.0).contains(&h) && s > 0.4 && v > 0.3
}

/// Whitens orange-band pixels (annotation arrows).
pub fn remove_arrows(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        if is_arrow_orange(p.0) {
            p.0 = [255, 255, 255];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub lpips: f64,
    pub gram_distance: f64,
    pub clip_score: f64,
    pub miou_left: Option<f64>,
    pub miou_right: Option<f64>,
    pub miou_overall: Option<f64>,
}

pub struct EvalContext<'a> {
    pub extractor: &'a dyn FeatureExtractor,
    pub scorers: ScorerConfig,
    pub perception: PerceptionConfig,
}

fn hand_pair(img: &RgbImage, cfg: &PerceptionConfig) -> Result<HandPair> {
    let one = |prompt: &str| -> Result<SpatialMask> {
        let masks = hand_masks(img, prompt, cfg)?;
        let mut acc = SpatialMask::empty(img.height() as usize, img.width() as usize, MaskKind::HandsStart);
        for m in masks {
            acc.values.zip_mut_with(&m.values, |a, &b| *a = a.max(b));
        }
        Ok(acc)
    };
    Ok(HandPair { left: one("left hand")?, right: one("right hand")? })
}

/// Best of the start/end illustrations against the arrow-free ground truth
/// for each style metric, plus hand mIOU of each illustration against its
/// source frame (averaged over the two pairs).
pub fn evaluate_sample(
    ctx: &EvalContext<'_>,
    sample_id: &str,
    gen_start: &RgbImage,
    gen_end: &RgbImage,
    gt: &RgbImage,
    frame_start: &RgbImage,
    frame_end: &RgbImage,
) -> Result<EvalRecord> {
    let clean = remove_arrows(gt);
    let mut lpips = f64::INFINITY;
    let mut gram = f64::INFINITY;
    let mut clip = f64::NEG_INFINITY;
    for g in [gen_start, gen_end] {
        lpips = lpips.min(external_score(Scorer::Lpips, g, &clean, &ctx.scorers, ctx.extractor)?);
        gram = gram.min(gram_distance(g, &clean, ctx.extractor)?);
        clip = clip.max(external_score(Scorer::Clip, g, &clean, &ctx.scorers, ctx.extractor)?);
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for (g, f) in [(gen_start, frame_start), (gen_end, frame_end)] {
        let f = if f.dimensions() == g.dimensions() { f.clone() } else { fit_square(f, g.width()) };
        if f.dimensions() != g.dimensions() {
            return Err(Error::Shape(format!("illustration {:?} is not square", g.dimensions())));
        }
        let r = miou(&hand_pair(g, &ctx.perception)?, &hand_pair(&f, &ctx.perception)?)?;
        left.extend(r.left);
        right.extend(r.right);
    }
    let (ml, mr) = (mean(&left), mean(&right));
    Ok(EvalRecord {
        sample_id: sample_id.to_string(),
        lpips,
        gram_distance: gram,
        clip_score: clip,
        miou_left: ml,
        miou_right: mr,
        miou_overall: mean(&[ml, mr].into_iter().flatten().collect::<Vec<_>>()),
    })
}

fn first_existing(candidates: &[PathBuf]) -> Result<PathBuf> {
    candidates
        .iter()
        .find(|p| p.exists())
        .cloned()
        .ok_or_else(|| Error::Validation(format!("missing input, looked for {}", candidates[0].display())))
}

/// Evaluates every `<gt>/<id>.png` against `<pred>/<id>/{start,end}.png`
/// (or `<pred>/<id>/illustrations/...`) and `<frames>/<id>/{start,end}.png`.
pub fn evaluate_dirs(ctx: &EvalContext<'_>, pred: &Path, gt: &Path, frames: &Path) -> Result<Vec<EvalRecord>> {
    let mut ids: Vec<String> = std::fs::read_dir(gt)
        .map_err(|e| Error::io(gt, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png" || e == "jpg"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Validation(format!("no ground-truth images in {}", gt.display())));
    }
    let mut out = Vec::new();
    for id in ids {
        let gt_path = first_existing(&[gt.join(format!("{id}.png")), gt.join(format!("{id}.jpg"))])?;
        let pick = |name: &str| {
            first_existing(&[pred.join(&id).join(format!("{name}.png")), pred.join(&id).join("illustrations").join(format!("{name}.png"))])
        };
        let rec = evaluate_sample(
            ctx,
            &id,
            &load_rgb(&pick("start")?)?,
            &load_rgb(&pick("end")?)?,
            &load_rgb(&gt_path)?,
            &load_rgb(&frames.join(&id).join("start.png"))?,
            &load_rgb(&frames.join(&id).join("end.png"))?,
        )?;
        out.push(rec);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn write_report(records: &[EvalRecord], dir: &Path, method: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let avg = |f: &dyn Fn(&EvalRecord) -> Option<f64>| mean(&records.iter().filter_map(f).collect::<Vec<_>>());
    let mut md = String::from("# Evaluation\n\n## Style\n\n| Method | LPIPS ↓ | Gram ↓ | CLIPScore ↑ |\n|---|---|---|---|\n");
    md += &format!(
        "| {method} | {} | {} | {} |\n",
        fmt_opt(avg(&|r| Some(r.lpips))),
        fmt_opt(avg(&|r| Some(r.gram_distance))),
        fmt_opt(avg(&|r| Some(r.clip_score)))
    );
    md += "\n## Hand gestures (mIOU ↑)\n\n| Method | Left | Right | Overall |\n|---|---|---|---|\n";
    md += &format!(
        "| {method} | {} | {} | {} |\n",
        fmt_opt(avg(&|r| r.miou_left)),
        fmt_opt(avg(&|r| r.miou_right)),
        fmt_opt(avg(&|r| r.miou_overall))
    );
    md += "\n## Samples\n\n| Sample | LPIPS | Gram | CLIPScore | mIOU left | mIOU right | mIOU overall |\n|---|---|---|---|---|---|---|\n";
    for r in records {
        md += &format!(
            "| {} | {:.4} | {:.4} | {:.4} | {} | {} | {} |\n",
            r.sample_id,
            r.lpips,
            r.gram_distance,
            r.clip_score,
            fmt_opt(r.miou_left),
            fmt_opt(r.miou_right),
            fmt_opt(r.miou_overall)
        );
    }
    let md_path = dir.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))
}
