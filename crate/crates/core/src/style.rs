//! First-stage generation: a video frame rendered in the reference style.
//!
//! Denoising starts from the inverted edge-map latent and replays its stored
//! noises. Inside the injection window the flagged attention layers take
//! keys and values from the style trajectory and a blend of image and edge
//! queries, and the latent is renormalized channelwise toward the style
//! latent of the same step.

use std::cell::Cell;
use std::collections::HashMap;

use image::RgbImage;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::fuse_queries;
use crate::backbone::{Denoiser, HookSpec, LayerSelector, PromptEmbedding, TimestepWindow};
use crate::error::{Error, Result};
use crate::inversion::{capture, replay_with, LatentTrajectory};
use crate::scalar::Scalar;
use crate::tensor::{AttentionTensor, Latent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleTransferConfig {
    pub gamma: f64,
    pub delta: f64,
    pub beta_contrast: f64,
    pub guidance_scale: f64,
    pub injection_window: TimestepWindow,
    pub adain_enabled: bool,
    pub prompt: String,
    pub layers: LayerSelector,
}

impl Default for StyleTransferConfig {
    fn default() -> Self {
        StyleTransferConfig {
            gamma: 1.0,
            delta: 0.5,
            beta_contrast: 1.67,
            guidance_scale: 3.5,
            injection_window: TimestepWindow::new(0, 70),
            adain_enabled: true,
            prompt: "a woman".into(),
            layers: LayerSelector::Flagged,
        }
    }
}

impl StyleTransferConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.delta >= 0.0) {
            return Err(Error::Validation(format!("gamma and delta must be >= 0 (got {}, {})", self.gamma, self.delta)));
        }
        if !(self.beta_contrast > 0.0) {
            return Err(Error::Validation(format!("contrast factor must be > 0 (got {})", self.beta_contrast)));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Validation("guidance scale must be finite".into()));
        }
        if !self.injection_window.within(steps) {
            return Err(Error::Validation(format!("injection window {} exceeds T={steps}", self.injection_window)));
        }
        Ok(())
    }
}

/// Channelwise renormalization of `content` to the mean and standard
/// deviation of `style`. Both are `[channels, H, W]`; spatial sizes may differ.
pub fn adain<S: Scalar>(content: &Array3<S>, style: &Array3<S>) -> Result<Array3<S>> {
    if content.shape()[0] != style.shape()[0] {
        return Err(Error::Shape(format!("adain: {} vs {} channels", content.shape()[0], style.shape()[0])));
    }
    let stats = |a: ndarray::ArrayView2<S>| {
        let n = S::from_usize(a.len()).unwrap();
        let mean = a.iter().copied().sum::<S>() / n;
        let var = a.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
        (mean, var.sqrt())
    };
    let mut out = content.clone();
    for (c, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (mc, sc) = stats(content.index_axis(Axis(0), c));
        let (ms, ss) = stats(style.index_axis(Axis(0), c));
        if sc == S::zero() {
            ch.fill(ms);
        } else {
            ch.mapv_inplace(|x| (x - mc) / sc * ss + ms);
        }
    }
    Ok(out)
}

/// Result of [`stylize_frame`].
#[derive(Debug, Clone)]
pub struct Stylized<S> {
    pub image: RgbImage,
    pub latent: Latent<S>,
    /// Latents visited during generation, indexed by `t`.
    pub path: Vec<Latent<S>>,
    pub hook_fires: usize,
}

fn check_pair<S: Scalar>(a: &LatentTrajectory<S>, b: &LatentTrajectory<S>, what: &str) -> Result<()> {
    if a.steps() != b.steps() || a.latent_shape() != b.latent_shape() {
        return Err(Error::Shape(format!(
            "{what}: T {} vs {}, shape {:?} vs {:?}",
            a.steps(),
            b.steps(),
            a.latent_shape(),
            b.latent_shape()
        )));
    }
    Ok(())
}

/// Builds the per-layer replacement tensors for the step consuming `z[t]`.
fn injections<S: Scalar>(
    handle: &dyn Denoiser<S>,
    traj_img: &LatentTrajectory<S>,
    traj_edges: &LatentTrajectory<S>,
    traj_style: &LatentTrajectory<S>,
    t: usize,
    prompt: &PromptEmbedding<S>,
    cfg: &StyleTransferConfig,
) -> Result<HashMap<String, AttentionTensor<S>>> {
    let img = capture(handle, traj_img, t, prompt, &cfg.layers)?;
    let edges = capture(handle, traj_edges, t, prompt, &cfg.layers)?;
    let style = capture(handle, traj_style, t, prompt, &cfg.layers)?;
    let (gamma, delta, beta) = (S::lit(cfg.gamma), S::lit(cfg.delta), S::lit(cfg.beta_contrast));
    let mut out = HashMap::new();
    for ((qi, qe), st) in img.into_iter().zip(edges).zip(style) {
        let q = fuse_queries(&qi.q, &qe.q, gamma, delta)?;
        let id = st.layer_id.clone();
        out.insert(id, AttentionTensor { q, contrast: beta, ..st });
    }
    Ok(out)
}

/// Generates the styled illustration of one frame from the inverted image,
/// edge map and style trajectories.
pub fn stylize_frame<S: Scalar>(
    handle: &dyn Denoiser<S>,
    traj_img: &LatentTrajectory<S>,
    traj_edges: &LatentTrajectory<S>,
    traj_style: &LatentTrajectory<S>,
    prompt: &PromptEmbedding<S>,
    cfg: &StyleTransferConfig,
) -> Result<Stylized<S>> {
    check_pair(traj_img, traj_edges, "image/edges trajectories")?;
    check_pair(traj_img, traj_style, "image/style trajectories")?;
    let steps = traj_edges.steps();
    cfg.validate(steps)?;
    if traj_edges.guidance_scale.to_f64_lossy() != cfg.guidance_scale {
        log::warn!(
            "edge trajectory inverted with guidance {} but generating with {}; the null-injection case will not reproduce the edge image",
            traj_edges.guidance_scale,
            cfg.guidance_scale
        );
    }
    let fires = Cell::new(0usize);
    let window = cfg.injection_window;
    let path = replay_with(
        handle,
        traj_edges,
        traj_edges.z[steps].clone(),
        steps,
        prompt,
        S::lit(cfg.guidance_scale),
        |t, z| {
            if !window.contains(t - 1) {
                return Ok(Vec::new());
            }
            if cfg.adain_enabled {
                *z = adain(z, &traj_style.z[t])?;
            }
            let table = injections(handle, traj_img, traj_edges, traj_style, t, prompt, cfg)?;
            let fires = &fires;
            Ok(vec![HookSpec::new(cfg.layers.clone(), window, move |a: AttentionTensor<S>| {
                let inj = table
                    .get(&a.layer_id)
                    .ok_or_else(|| format!("no captured features for layer {}", a.layer_id))?;
                fires.set(fires.get() + 1);
                Ok(AttentionTensor { q: inj.q.clone(), k: inj.k.clone(), v: inj.v.clone(), contrast: inj.contrast, ..a })
            })])
        },
    )?;
    let latent = path[0].clone();
    let image = handle.decode(&latent)?;
    Ok(Stylized { image, latent, path, hook_fires: fires.get() })
}
