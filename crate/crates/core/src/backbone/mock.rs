//! Deterministic miniature denoiser for desk-scale tests.
//!
//! Latents are 3-channel (RGB) grids produced by 4x average pooling; the
//! noise predictor is a residual stack of seeded self-attention layers
//! followed by a linear channel mix scaled by `sqrt(1 - alpha_bar_t)`, plus
//! prompt and timestep biases. Attention is computed once per step and
//! shared by the conditional and unconditional branches.

use std::sync::atomic::{AtomicU64, Ordering};

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    apply_hooks, BackboneError, BackboneInfo, BlockKind, DdpmSchedule, Denoiser, HookSpec, LayerInfo,
    PromptEmbedding,
};
use crate::attention::styled_attention;
use crate::scalar::Scalar;
use crate::tensor::{AttentionTensor, HeadFeatures, Latent};

const LATENT_CHANNELS: usize = 3;
const EMBED_DIM: usize = 8;
const POOL: usize = 4;
const ATTN_GAIN: f64 = 0.5;
const COND_GAIN: f64 = 0.05;
const TIME_GAIN: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights<S> {
    wq: Array2<S>,
    wk: Array2<S>,
    wv: Array2<S>,
    wo: Array2<S>,
}

/// Seeded projection matrices; fully determined by `seed` and the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MockWeights<S> {
    pub seed: u64,
    layers: Vec<LayerWeights<S>>,
    mix: Array2<S>,
    cond_proj: Array2<S>,
    time_bias: Array1<S>,
}

impl<S: Scalar> MockWeights<S> {
    fn generate(seed: u64, layer_count: usize, heads: usize, head_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || {
                let x: f64 = StandardNormal.sample(&mut rng);
                S::lit(x * scale)
            })
        };
        let inner = heads * head_channels;
        let c = LATENT_CHANNELS;
        let layers = (0..layer_count)
            .map(|_| LayerWeights {
                wq: normal(inner, c, 1.0 / (c as f64).sqrt()),
                wk: normal(inner, c, 1.0 / (c as f64).sqrt()),
                wv: normal(inner, c, 1.0 / (c as f64).sqrt()),
                wo: normal(c, inner, 1.0 / (inner as f64).sqrt()),
            })
            .collect();
        let mut mix = normal(c, c, 0.1);
        for i in 0..c {
            mix[[i, i]] += S::one();
        }
        let cond_proj = normal(c, EMBED_DIM, COND_GAIN);
        let time_bias = normal(1, c, TIME_GAIN).index_axis_move(Axis(0), 0);
        MockWeights { seed, layers, mix, cond_proj, time_bias }
    }

    /// Query projection of layer `index`.
    pub fn query_projection(&self, index: usize) -> &Array2<S> {
        &self.layers[index].wq
    }
}

pub struct MockBackbone<S> {
    info: BackboneInfo,
    layers: Vec<LayerInfo>,
    weights: MockWeights<S>,
    passes: AtomicU64,
}

/// Builds a mock denoiser with `heads` heads of `head_channels` channels on a
/// `latent_size` grid (images are `4 * latent_size` pixels square).
pub fn build_mock<S: Scalar>(
    seed: u64,
    heads: usize,
    latent_size: usize,
    head_channels: usize,
) -> Result<MockBackbone<S>, BackboneError> {
    if heads == 0 || latent_size == 0 || head_channels == 0 {
        return Err(BackboneError::Config(format!(
            "mock dimensions must be >= 1 (heads={heads}, latent_size={latent_size}, head_channels={head_channels})"
        )));
    }
    let mut layers = Vec::new();
    if latent_size >= 2 && latent_size.is_multiple_of(2) {
        layers.push(LayerInfo { id: "down.0.attn1".into(), block: BlockKind::Down, resolution: latent_size / 2, flagged: false });
    }
    for i in 0..2 {
        layers.push(LayerInfo { id: format!("up.{i}.attn1"), block: BlockKind::Up, resolution: latent_size, flagged: true });
    }
    let weights = MockWeights::generate(seed, layers.len(), heads, head_channels);
    Ok(MockBackbone {
        info: BackboneInfo {
            image_size: latent_size * POOL,
            latent_size,
            latent_channels: LATENT_CHANNELS,
            heads,
            head_channels,
            timestep_count: 100,
        },
        layers,
        weights,
        passes: AtomicU64::new(0),
    })
}

impl<S: Scalar> MockBackbone<S> {
    pub fn weights(&self) -> &MockWeights<S> {
        &self.weights
    }

    /// Projects a `[C, r, r]` feature grid to `[heads, r, r, head_channels]`.
    fn project(&self, x: &Array3<S>, w: &Array2<S>) -> HeadFeatures<S> {
        let (c, h, wd) = x.dim();
        let (heads, hc) = (self.info.heads, self.info.head_channels);
        let tokens = x.view().into_shape_with_order((c, h * wd)).expect("contiguous grid");
        let proj = w.dot(&tokens); // [heads*hc, h*w]
        Array4::from_shape_fn((heads, h, wd, hc), |(hd, y, xx, ch)| proj[[hd * hc + ch, y * wd + xx]])
    }

    /// Maps `[heads, r, r, hc]` attention output back to `[C, r, r]`.
    fn output(&self, o: &HeadFeatures<S>, wo: &Array2<S>) -> Array3<S> {
        let (heads, h, wd, hc) = o.dim();
        let flat = Array2::from_shape_fn((heads * hc, h * wd), |(i, p)| o[[i / hc, p / wd, p % wd, i % hc]]);
        wo.dot(&flat).into_shape_with_order((LATENT_CHANNELS, h, wd)).expect("output grid")
    }

    fn embed(text: &str) -> Array1<S> {
        if text.is_empty() {
            return Array1::zeros(EMBED_DIM);
        }
        let digest = Sha256::digest(text.as_bytes());
        Array1::from_shape_fn(EMBED_DIM, |i| S::lit(digest[i] as f64 / 127.5 - 1.0))
    }
}

fn avg_pool<S: Scalar>(x: &Array3<S>, f: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    let norm = S::from_usize(f * f).unwrap();
    Array3::from_shape_fn((c, h / f, w / f), |(ch, y, xx)| {
        let mut s = S::zero();
        for dy in 0..f {
            for dx in 0..f {
                s += x[[ch, y * f + dy, xx * f + dx]];
            }
        }
        s / norm
    })
}

fn upsample<S: Scalar>(x: &Array3<S>, f: usize) -> Array3<S> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * f, w * f), |(ch, y, xx)| x[[ch, y / f, xx / f]])
}

impl<S: Scalar> Denoiser<S> for MockBackbone<S> {
    fn info(&self) -> &BackboneInfo {
        &self.info
    }

    fn hookable_layers(&self) -> Result<Vec<LayerInfo>, BackboneError> {
        Ok(self.layers.clone())
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent<S>, BackboneError> {
        let size = self.info.image_size as u32;
        if image.width() != size || image.height() != size {
            return Err(BackboneError::Contract(format!(
                "image is {}x{}, backbone expects {size}x{size}",
                image.width(),
                image.height()
            )));
        }
        let n = self.info.latent_size;
        let norm = S::lit((POOL * POOL) as f64 * 255.0);
        Ok(Array3::from_shape_fn((LATENT_CHANNELS, n, n), |(c, y, x)| {
            let mut s = S::zero();
            for dy in 0..POOL {
                for dx in 0..POOL {
                    s += S::lit(image.get_pixel((x * POOL + dx) as u32, (y * POOL + dy) as u32)[c] as f64);
                }
            }
            s / norm
        }))
    }

    fn decode(&self, latent: &Latent<S>) -> Result<RgbImage, BackboneError> {
        let n = self.info.latent_size;
        if latent.shape() != [LATENT_CHANNELS, n, n] {
            return Err(BackboneError::Contract(format!("latent shape {:?}", latent.shape())));
        }
        let size = self.info.image_size as u32;
        Ok(RgbImage::from_fn(size, size, |x, y| {
            let (lx, ly) = (x as usize / POOL, y as usize / POOL);
            let px = |c: usize| {
                let v = latent[[c, ly, lx]].to_f64_lossy();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        }))
    }

    fn embed_prompt(&self, text: &str) -> Result<PromptEmbedding<S>, BackboneError> {
        let to_dyn = |a: Array1<S>| a.into_shape_with_order(IxDyn(&[EMBED_DIM])).expect("1-d");
        Ok(PromptEmbedding { text: text.to_owned(), cond: to_dyn(Self::embed(text)), uncond: to_dyn(Self::embed("")) })
    }

    fn predict_noise(
        &self,
        z_t: &Latent<S>,
        t: usize,
        schedule: &DdpmSchedule,
        prompt: &PromptEmbedding<S>,
        guidance_scale: S,
        hooks: &mut [HookSpec<'_, S>],
    ) -> Result<Latent<S>, BackboneError> {
        if t == 0 || t > schedule.steps() {
            return Err(BackboneError::Contract(format!("step {t} outside 1..={}", schedule.steps())));
        }
        let n = self.info.latent_size;
        if z_t.shape() != [LATENT_CHANNELS, n, n] {
            return Err(BackboneError::Contract(format!("latent shape {:?}", z_t.shape())));
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let step = t - 1;
        let gain = S::lit(ATTN_GAIN);
        let mut h = z_t.clone();
        for (info, w) in self.layers.iter().zip(&self.weights.layers) {
            let factor = n / info.resolution;
            let input = if factor == 1 { h.clone() } else { avg_pool(&h, factor) };
            let tensor = AttentionTensor {
                q: self.project(&input, &w.wq),
                k: self.project(&input, &w.wk),
                v: self.project(&input, &w.wv),
                layer_id: info.id.clone(),
                timestep: step,
                contrast: S::one(),
            };
            let tensor = apply_hooks(hooks, info, tensor)?;
            let o = styled_attention(&tensor.q, &tensor.k, &tensor.v, self.info.head_channels, tensor.contrast)
                .map_err(|e| BackboneError::Contract(format!("layer {}: {e}", info.id)))?;
            let mut out = self.output(&o, &w.wo);
            if factor != 1 {
                out = upsample(&out, factor);
            }
            h.zip_mut_with(&out, |a, &b| *a += gain * b);
        }

        let scale = S::lit((1.0 - schedule.alpha_bar(t)).sqrt());
        let phase = S::lit((schedule.train_timestep(t) as f64 / 1000.0 * std::f64::consts::PI).sin());
        let flat = h.view().into_shape_with_order((LATENT_CHANNELS, n * n)).expect("contiguous");
        let mixed = self.weights.mix.dot(&flat).into_shape_with_order((LATENT_CHANNELS, n, n)).expect("grid");
        let vec_of = |e: &ArrayD<S>| -> Result<Array1<S>, BackboneError> {
            let e = e
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| BackboneError::Contract("mock prompt embedding must be 1-d".into()))?;
            if e.len() != EMBED_DIM {
                return Err(BackboneError::Contract(format!("embedding length {}", e.len())));
            }
            Ok(self.weights.cond_proj.dot(&e))
        };
        let cond = vec_of(&prompt.cond)?;
        let uncond = vec_of(&prompt.uncond)?;
        let mut eps = Array3::zeros((LATENT_CHANNELS, n, n));
        for c in 0..LATENT_CHANNELS {
            let base = self.weights.time_bias[c] * phase;
            let (bu, bc) = (base + uncond[c], base + cond[c]);
            for y in 0..n {
                for x in 0..n {
                    let m = scale * mixed[[c, y, x]];
                    let (eu, ec) = (m + bu, m + bc);
                    eps[[c, y, x]] = eu + guidance_scale * (ec - eu);
                }
            }
        }
        if eps.iter().any(|x: &S| !x.is_finite()) {
            return Err(BackboneError::Contract(format!("non-finite noise prediction at step {t}")));
        }
        Ok(eps)
    }

    fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }
}
