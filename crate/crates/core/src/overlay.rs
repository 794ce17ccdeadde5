//! Second-stage generation: one illustration holding both the start and the
//! end pose, obtained by composing the two illustrations' attention queries.
//!
//! Per flagged layer and step, queries `Q1`, `Q2` are captured from the
//! inverted latents of the two illustrations. Pixels whose queries disagree
//! most (cosine similarity below an empirical quantile) take `Q2`, the rest
//! `Q1`; hand/arm masks then force `Q1` inside the start pose and `Q2` inside
//! the end pose.

use std::cell::Cell;
use std::collections::HashMap;

use image::RgbImage;
use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::{Denoiser, HookSpec, LayerSelector, PromptEmbedding, TimestepWindow};
use crate::error::{Error, Result};
use crate::inversion::{capture, replay_with, LatentTrajectory};
use crate::scalar::Scalar;
use crate::tensor::{AttentionTensor, HeadFeatures, Latent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Similarity,
    Dissimilarity,
    HandsStart,
    HandsEnd,
    ArmsStart,
    ArmsEnd,
    CombinedStart,
    CombinedEnd,
}

impl MaskKind {
    pub fn is_binary(self) -> bool {
        self != MaskKind::Similarity
    }
}

/// A 2-D map over image or latent cells, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    pub values: Array2<f64>,
    pub kind: MaskKind,
}

impl SpatialMask {
    pub fn new(values: Array2<f64>, kind: MaskKind) -> Result<Self> {
        let ok = if kind.is_binary() {
            values.iter().all(|&v| v == 0.0 || v == 1.0)
        } else {
            values.iter().all(|&v| (-1.0..=1.0).contains(&v))
        };
        if !ok {
            return Err(Error::Validation(format!("{kind:?} mask has out-of-range values")));
        }
        Ok(SpatialMask { values, kind })
    }

    pub fn empty(rows: usize, cols: usize, kind: MaskKind) -> Self {
        SpatialMask { values: Array2::zeros((rows, cols)), kind }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn with_kind(mut self, kind: MaskKind) -> Self {
        self.kind = kind;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleRule {
    #[default]
    MaxPool,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvSource {
    /// Keys and values computed from the evolving output latent.
    #[default]
    Native,
    /// Keys and values captured from the start illustration.
    Start,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayConfig {
    pub quantile: f64,
    pub window: TimestepWindow,
    pub mask_downsample_rule: DownsampleRule,
    pub dilation_radius: usize,
    /// Final steps of the window that run without recomposition.
    pub polish_steps: usize,
    pub guidance_scale: f64,
    pub apply_guidance: bool,
    pub kv_source: KvSource,
    pub layers: LayerSelector,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            quantile: 0.1,
            window: TimestepWindow::new(0, 50),
            mask_downsample_rule: DownsampleRule::MaxPool,
            dilation_radius: 1,
            polish_steps: 5,
            guidance_scale: 3.5,
            apply_guidance: true,
            kv_source: KvSource::Native,
            layers: LayerSelector::Flagged,
        }
    }
}

impl OverlayConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Validation(format!("quantile must be in (0, 1), got {}", self.quantile)));
        }
        if !self.window.within(steps) {
            return Err(Error::Validation(format!("overlay window {} exceeds T={steps}", self.window)));
        }
        Ok(())
    }

    /// Guidance scale actually used for overlay denoising.
    pub fn effective_guidance(&self) -> f64 {
        if self.apply_guidance {
            self.guidance_scale
        } else {
            1.0
        }
    }
}

/// Per-pixel cosine similarity along channels, averaged over heads.
/// A zero-norm query vector contributes similarity 0.
pub fn query_similarity<S: Scalar>(q1: &HeadFeatures<S>, q2: &HeadFeatures<S>) -> Result<SpatialMask> {
    if q1.shape() != q2.shape() {
        return Err(Error::Shape(format!("query_similarity: {:?} vs {:?}", q1.shape(), q2.shape())));
    }
    let (heads, h, w, d) = q1.dim();
    let mut sim = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for hd in 0..heads {
                let (mut dot, mut n1, mut n2) = (0.0f64, 0.0f64, 0.0f64);
                for c in 0..d {
                    let (a, b) = (q1[[hd, y, x, c]].to_f64_lossy(), q2[[hd, y, x, c]].to_f64_lossy());
                    dot += a * b;
                    n1 += a * a;
                    n2 += b * b;
                }
                let denom = (n1 * n2).sqrt();
                if denom > 0.0 {
                    acc += dot / denom;
                }
            }
            sim[[y, x]] = (acc / heads as f64).clamp(-1.0, 1.0);
        }
    }
    SpatialMask::new(sim, MaskKind::Similarity)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Flags pixels whose similarity lies strictly below the `quantile` of all similarities.
pub fn dissimilarity_mask(m_sim: &SpatialMask, quantile: f64) -> SpatialMask {
    let flat: Vec<f64> = m_sim.values.iter().copied().collect();
    if flat.is_empty() {
        return SpatialMask::empty(0, 0, MaskKind::Dissimilarity);
    }
    let threshold = empirical_quantile(&flat, quantile);
    SpatialMask {
        values: m_sim.values.mapv(|v| if v < threshold { 1.0 } else { 0.0 }),
        kind: MaskKind::Dissimilarity,
    }
}

/// Reduces a binary mask to `rows x cols` cells. Max-pooling marks a cell
/// when any source pixel inside it is set.
pub fn downsample_mask(mask: &Array2<f64>, rows: usize, cols: usize, rule: DownsampleRule) -> Array2<f64> {
    let (h, w) = mask.dim();
    if (h, w) == (rows, cols) {
        return mask.clone();
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| match rule {
        DownsampleRule::Nearest => {
            let y = ((i as f64 + 0.5) * h as f64 / rows as f64) as usize;
            let x = ((j as f64 + 0.5) * w as f64 / cols as f64) as usize;
            mask[[y.min(h - 1), x.min(w - 1)]]
        }
        DownsampleRule::MaxPool => {
            let (y0, y1) = (i * h / rows, ((i + 1) * h).div_ceil(rows).max(i * h / rows + 1));
            let (x0, x1) = (j * w / cols, ((j + 1) * w).div_ceil(cols).max(j * w / cols + 1));
            let hit = mask.slice(ndarray::s![y0..y1.min(h), x0..x1.min(w)]).iter().any(|&v| v != 0.0);
            if hit {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Square (Chebyshev) dilation by `radius` cells.
pub fn dilate(mask: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (i as isize + dy, j as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0.0 {
                    return 1.0;
                }
            }
        }
        0.0
    })
}

/// Union of pixel-resolution hand and arm masks, pooled to a
/// `latent_size` grid and dilated.
pub fn combine_masks(
    hands: &[SpatialMask],
    arms: &[SpatialMask],
    latent_size: usize,
    cfg: &OverlayConfig,
    kind: MaskKind,
) -> Result<SpatialMask> {
    let mut all = hands.iter().chain(arms.iter());
    let Some(first) = all.next() else {
        log::warn!("no hand or arm masks for {kind:?}; combined mask is empty");
        return Ok(SpatialMask::empty(latent_size, latent_size, kind));
    };
    let dim = first.dim();
    let mut union = first.values.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
    for m in all {
        if m.dim() != dim {
            return Err(Error::Shape(format!("combine_masks: {:?} vs {:?}", m.dim(), dim)));
        }
        union.zip_mut_with(&m.values, |u, &v| {
            if v != 0.0 {
                *u = 1.0
            }
        });
    }
    if union.iter().all(|&v| v == 0.0) {
        log::warn!("hand and arm masks for {kind:?} are empty");
    }
    let pooled = downsample_mask(&union, latent_size, latent_size, cfg.mask_downsample_rule);
    Ok(SpatialMask { values: dilate(&pooled, cfg.dilation_radius), kind })
}

/// Applies, in order: `Q1(1-m_dis) + Q2 m_dis`, then `Q(1-m1) + Q1 m1`, then
/// `Q(1-m2) + Q2 m2`. Masks are `[H, W]` and broadcast over heads and channels.
pub fn compose_queries<S: Scalar>(
    q1: &HeadFeatures<S>,
    q2: &HeadFeatures<S>,
    m_dis: &Array2<f64>,
    m1: &Array2<f64>,
    m2: &Array2<f64>,
) -> Result<HeadFeatures<S>> {
    if q1.shape() != q2.shape() {
        return Err(Error::Shape(format!("compose_queries: {:?} vs {:?}", q1.shape(), q2.shape())));
    }
    let (_, h, w, _) = q1.dim();
    for (name, m) in [("m_dis", m_dis), ("m1", m1), ("m2", m2)] {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("{name} is {:?}, queries are {h}x{w}", m.dim())));
        }
    }
    let blend = |base: &mut HeadFeatures<S>, other: &HeadFeatures<S>, m: &Array2<f64>| {
        for (mut bh, oh) in base.axis_iter_mut(Axis(0)).zip(other.axis_iter(Axis(0))) {
            Zip::indexed(&mut bh).and(&oh).for_each(|(y, x, _), b, &o| {
                let mv = S::lit(m[[y, x]]);
                *b = *b * (S::one() - mv) + o * mv;
            });
        }
    };
    let mut out = q1.clone();
    blend(&mut out, q2, m_dis);
    blend(&mut out, q1, m1);
    blend(&mut out, q2, m2);
    Ok(out)
}

/// Whether the two combined masks share any cell.
pub fn hands_overlap(m1: &SpatialMask, m2: &SpatialMask) -> bool {
    m1.dim() == m2.dim() && m1.values.iter().zip(m2.values.iter()).any(|(&a, &b)| a != 0.0 && b != 0.0)
}

#[derive(Debug, Clone)]
pub struct OverlayOutput<S> {
    pub image: RgbImage,
    pub latent: Latent<S>,
    pub compositions: usize,
}

/// Denoises from the start illustration's inverted noise while composing
/// queries from both illustrations. Returns [`Error::OverlapSkip`] when the
/// combined masks intersect.
pub fn run_overlay<S: Scalar>(
    handle: &dyn Denoiser<S>,
    traj_1: &LatentTrajectory<S>,
    traj_2: &LatentTrajectory<S>,
    m1: &SpatialMask,
    m2: &SpatialMask,
    prompt: &PromptEmbedding<S>,
    cfg: &OverlayConfig,
) -> Result<OverlayOutput<S>> {
    if traj_1.steps() != traj_2.steps() || traj_1.latent_shape() != traj_2.latent_shape() {
        return Err(Error::Shape("illustration trajectories differ in length or shape".into()));
    }
    let steps = traj_1.steps();
    cfg.validate(steps)?;
    if hands_overlap(m1, m2) {
        return Err(Error::OverlapSkip);
    }
    let layers = handle.selected_layers(&cfg.layers)?;
    let mut layer_masks = HashMap::new();
    for l in &layers {
        let r = l.resolution;
        let pool = |m: &SpatialMask| downsample_mask(&m.values, r, r, cfg.mask_downsample_rule);
        layer_masks.insert(l.id.clone(), (pool(m1), pool(m2)));
    }
    let compositions = Cell::new(0usize);
    let window = cfg.window;
    let polish = cfg.polish_steps;
    let path = replay_with(
        handle,
        traj_1,
        traj_1.z[steps].clone(),
        steps,
        prompt,
        S::lit(cfg.effective_guidance()),
        |t, _z| {
            let label = t - 1;
            if !window.contains(label) || label < polish {
                return Ok(Vec::new());
            }
            let c1 = capture(handle, traj_1, t, prompt, &cfg.layers)?;
            let c2 = capture(handle, traj_2, t, prompt, &cfg.layers)?;
            let mut table = HashMap::new();
            for (a, b) in c1.into_iter().zip(c2) {
                let (mm1, mm2) = &layer_masks[&a.layer_id];
                let sim = query_similarity(&a.q, &b.q)?;
                let dis = dissimilarity_mask(&sim, cfg.quantile);
                let q = compose_queries(&a.q, &b.q, &dis.values, mm1, mm2)?;
                table.insert(a.layer_id.clone(), (q, a));
            }
            let compositions = &compositions;
            let kv = cfg.kv_source;
            Ok(vec![HookSpec::new(cfg.layers.clone(), window, move |a: AttentionTensor<S>| {
                let (q, start) = table
                    .get(&a.layer_id)
                    .ok_or_else(|| format!("no captured queries for layer {}", a.layer_id))?;
                compositions.set(compositions.get() + 1);
                Ok(match kv {
                    KvSource::Native => AttentionTensor { q: q.clone(), ..a },
                    KvSource::Start => AttentionTensor { q: q.clone(), k: start.k.clone(), v: start.v.clone(), ..a },
                })
            })])
        },
    )?;
    let latent = path[0].clone();
    let image = handle.decode(&latent)?;
    Ok(OverlayOutput { image, latent, compositions: compositions.get() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn disc(size: usize, cx: f64, cy: f64, r: f64) -> Array2<f64> {
        Array2::from_shape_fn((size, size), |(y, x)| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn similarity_extremes() {
        let q = Array4::from_shape_fn((2, 3, 3, 4), |(h, y, x, c)| (h * 5 + y * 3 + x + c) as f64 * 0.37 - 1.1);
        let same = query_similarity(&q, &q).unwrap();
        assert!(same.values.iter().all(|&v| v == 1.0));
        let neg = query_similarity(&q, &q.mapv(|v| -v)).unwrap();
        assert!(neg.values.iter().all(|&v| v == -1.0));
        let zeros = Array4::<f64>::zeros((2, 3, 3, 4));
        assert!(query_similarity(&q, &zeros).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_heads_give_zero() {
        let mut a = Array4::<f64>::zeros((2, 2, 2, 2));
        let mut b = Array4::<f64>::zeros((2, 2, 2, 2));
        for h in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    a[[h, y, x, 0]] = 1.0 + h as f64;
                    b[[h, y, x, 1]] = 3.0 - x as f64;
                }
            }
        }
        assert!(query_similarity(&a, &b).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dissimilarity_rank_oracle() {
        // 100 distinct values, permuted; exactly the ten smallest are flagged
        let vals: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 100.0 - 0.5).collect();
        let sim = SpatialMask::new(Array2::from_shape_vec((10, 10), vals.clone()).unwrap(), MaskKind::Similarity).unwrap();
        let dis = dissimilarity_mask(&sim, 0.1);
        assert_eq!(dis.count_ones(), 10);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for (v, m) in sim.values.iter().zip(dis.values.iter()) {
            assert_eq!(*m == 1.0, *v < sorted[10]);
        }
        let ones = SpatialMask::new(Array2::from_elem((4, 4), 1.0), MaskKind::Similarity).unwrap();
        assert!(dissimilarity_mask(&ones, 0.1).is_empty());
    }

    #[test]
    fn combine_cases() {
        let cfg = OverlayConfig { dilation_radius: 0, ..Default::default() };
        let hands = SpatialMask::new(disc(32, 10.0, 12.0, 5.0), MaskKind::HandsStart).unwrap();
        let arms_empty = SpatialMask::empty(32, 32, MaskKind::ArmsStart);
        let c = combine_masks(std::slice::from_ref(&hands), &[arms_empty], 8, &cfg, MaskKind::CombinedStart).unwrap();
        assert_eq!(c.values, downsample_mask(&hands.values, 8, 8, DownsampleRule::MaxPool));
        let full = SpatialMask::new(Array2::from_elem((32, 32), 1.0), MaskKind::HandsStart).unwrap();
        let c = combine_masks(&[full], &[], 8, &OverlayConfig::default(), MaskKind::CombinedStart).unwrap();
        assert!(c.values.iter().all(|&v| v == 1.0));
        let none = combine_masks(&[], &[], 8, &cfg, MaskKind::CombinedEnd).unwrap();
        assert_eq!(none.dim(), (8, 8));
        assert!(none.is_empty());
    }

    #[test]
    fn overlap_cases() {
        let cfg = OverlayConfig::default();
        let a = SpatialMask::new(disc(64, 12.0, 32.0, 6.0), MaskKind::HandsStart).unwrap();
        let b = SpatialMask::new(disc(64, 52.0, 32.0, 6.0), MaskKind::HandsEnd).unwrap();
        let ca = combine_masks(std::slice::from_ref(&a), &[], 16, &cfg, MaskKind::CombinedStart).unwrap();
        let cb = combine_masks(&[b], &[], 16, &cfg, MaskKind::CombinedEnd).unwrap();
        assert!(!hands_overlap(&ca, &cb));
        assert!(hands_overlap(&ca, &ca));
    }

    #[test]
    fn tangent_masks_touch_after_dilation() {
        // columns 0..=3 and 5..=7 leave a one-cell gap at column 4
        let left = Array2::from_shape_fn((8, 8), |(_, x)| if x <= 3 { 1.0 } else { 0.0 });
        let right = Array2::from_shape_fn((8, 8), |(_, x)| if x >= 5 { 1.0 } else { 0.0 });
        let cfg = OverlayConfig { dilation_radius: 1, ..Default::default() };
        let l = combine_masks(&[SpatialMask::new(left.clone(), MaskKind::HandsStart).unwrap()], &[], 8, &cfg, MaskKind::CombinedStart).unwrap();
        let r = combine_masks(&[SpatialMask::new(right.clone(), MaskKind::HandsEnd).unwrap()], &[], 8, &cfg, MaskKind::CombinedEnd).unwrap();
        assert!(hands_overlap(&l, &r));
        let cfg0 = OverlayConfig { dilation_radius: 0, ..cfg };
        let l0 = combine_masks(&[SpatialMask::new(left, MaskKind::HandsStart).unwrap()], &[], 8, &cfg0, MaskKind::CombinedStart).unwrap();
        let r0 = combine_masks(&[SpatialMask::new(right, MaskKind::HandsEnd).unwrap()], &[], 8, &cfg0, MaskKind::CombinedEnd).unwrap();
        assert!(!hands_overlap(&l0, &r0));
    }

    #[test]
    fn compose_trivial_cases() {
        let q1 = Array4::from_shape_fn((2, 3, 3, 2), |(h, y, x, c)| (h + y * 3 + x + c) as f64);
        let q2 = q1.mapv(|v| 100.0 - v);
        let zero = Array2::zeros((3, 3));
        let one = Array2::from_elem((3, 3), 1.0);
        assert_eq!(compose_queries(&q1, &q2, &zero, &zero, &zero).unwrap(), q1);
        assert_eq!(compose_queries(&q1, &q2, &one, &zero, &zero).unwrap(), q2);
        assert!(compose_queries(&q1, &q2, &Array2::zeros((2, 3)), &zero, &zero).is_err());
    }

    #[test]
    fn invalid_masks_rejected() {
        assert!(SpatialMask::new(Array2::from_elem((2, 2), 0.5), MaskKind::HandsStart).is_err());
        assert!(SpatialMask::new(Array2::from_elem((2, 2), 1.5), MaskKind::Similarity).is_err());
        assert!(OverlayConfig { quantile: 1.0, ..Default::default() }.validate(100).is_err());
        assert!(OverlayConfig::default().validate(40).is_err());
    }

    mod mock {
        use super::super::*;
        use crate::backbone::build_mock;
        use crate::inversion::{invert, SourceTag};
        use crate::tensor::max_abs_diff;
        use ndarray::Array3;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, StandardNormal};

        fn latent(seed: u64) -> Latent<f32> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array3::from_shape_simple_fn((3, 8, 8), || {
                let v: f64 = StandardNormal.sample(&mut rng);
                (0.5 + 0.2 * v) as f32
            })
        }

        fn half(left: bool, kind: MaskKind) -> SpatialMask {
            let v = Array2::from_shape_fn((8, 8), |(_, x)| if (x < 3) == left && (x > 4 || left) { 1.0 } else { 0.0 });
            SpatialMask::new(v, kind).unwrap()
        }

        #[test]
        fn self_overlay_is_identity() {
            let m = build_mock::<f32>(3, 2, 8, 4).unwrap();
            let p = m.embed_prompt("a woman").unwrap();
            let t1 = invert(&m, &latent(1), 20, &p, 3.5, 1, SourceTag::Illustration1).unwrap();
            let cfg = OverlayConfig { window: TimestepWindow::new(0, 19), polish_steps: 0, ..Default::default() };
            let out = run_overlay(&m, &t1, &t1, &half(true, MaskKind::CombinedStart), &half(false, MaskKind::CombinedEnd), &p, &cfg).unwrap();
            assert!(max_abs_diff(&out.latent, &t1.z[0]) < 1e-6);
        }

        #[test]
        fn composition_count_and_effect() {
            let m = build_mock::<f32>(3, 2, 8, 4).unwrap();
            let p = m.embed_prompt("a woman").unwrap();
            let t1 = invert(&m, &latent(1), 10, &p, 3.5, 1, SourceTag::Illustration1).unwrap();
            let t2 = invert(&m, &latent(2), 10, &p, 3.5, 2, SourceTag::Illustration2).unwrap();
            let (m1, m2) = (half(true, MaskKind::CombinedStart), half(false, MaskKind::CombinedEnd));
            let flagged = m.selected_layers(&LayerSelector::Flagged).unwrap().len();
            let cfg = OverlayConfig { window: TimestepWindow::new(0, 5), polish_steps: 0, ..Default::default() };
            let out = run_overlay(&m, &t1, &t2, &m1, &m2, &p, &cfg).unwrap();
            assert_eq!(out.compositions, 6 * flagged);
            assert!(max_abs_diff(&out.latent, &t1.z[0]) > 1e-4);
            let polished = run_overlay(&m, &t1, &t2, &m1, &m2, &p, &OverlayConfig { polish_steps: 2, ..cfg }).unwrap();
            assert_eq!(polished.compositions, 4 * flagged);
        }

        #[test]
        fn overlapping_masks_skip() {
            let m = build_mock::<f32>(3, 2, 8, 4).unwrap();
            let p = m.embed_prompt("a woman").unwrap();
            let t1 = invert(&m, &latent(1), 5, &p, 3.5, 1, SourceTag::Illustration1).unwrap();
            let m1 = half(true, MaskKind::CombinedStart);
            let cfg = OverlayConfig { window: TimestepWindow::new(0, 4), ..Default::default() };
            let err = run_overlay(&m, &t1, &t1, &m1, &m1, &p, &cfg).unwrap_err();
            assert!(matches!(err, Error::OverlapSkip));
        }
    }
}
