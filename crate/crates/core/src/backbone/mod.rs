//! Denoiser abstraction with self-attention hooks.
//!
//! Timestep conventions: latents are indexed `t = 0..=T`, `z_T` being pure
//! noise and `z_0` the clean latent. The denoising step that consumes `z_t`
//! and produces `z_{t-1}` carries the *step label* `t - 1`; hook windows and
//! [`AttentionTensor::timestep`] use step labels, so a window `0..=70`
//! covers the final 71 steps of a schedule.

mod mock;
mod scheduler;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{build_mock, MockBackbone, MockWeights};
pub use scheduler::{DdpmSchedule, TRAIN_TIMESTEPS};

use crate::scalar::Scalar;
use crate::tensor::{AttentionTensor, Latent};

pub type HookError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("backbone configuration: {0}")]
    Config(String),
    #[error("backbone unavailable: {0}")]
    Unavailable(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("hook on layer {layer} at step {step} failed: {source}")]
    Hook {
        layer: String,
        step: usize,
        #[source]
        source: HookError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Down,
    Mid,
    Up,
}

/// A hookable self-attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub block: BlockKind,
    /// Spatial side length of the layer's token grid.
    pub resolution: usize,
    /// Decoder self-attention at the final (latent) resolution.
    pub flagged: bool,
}

/// Static description of a loaded denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneInfo {
    pub image_size: usize,
    pub latent_size: usize,
    pub latent_channels: usize,
    pub heads: usize,
    pub head_channels: usize,
    pub timestep_count: usize,
}

/// Which layers a hook applies to.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    /// Layers the backbone flags as final-resolution decoder attention.
    #[default]
    Flagged,
    Ids(Vec<String>),
    Nothing,
}

impl LayerSelector {
    pub fn matches(&self, layer: &LayerInfo) -> bool {
        match self {
            LayerSelector::Flagged => layer.flagged,
            LayerSelector::Ids(ids) => ids.contains(&layer.id),
            LayerSelector::Nothing => false,
        }
    }
}

/// Inclusive range of step labels; may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TimestepWindow {
    range: Option<(usize, usize)>,
}

impl TimestepWindow {
    pub const EMPTY: TimestepWindow = TimestepWindow { range: None };

    /// Panics if `lo > hi`.
    pub fn new(lo: usize, hi: usize) -> Self {
        assert!(lo <= hi, "window {lo}:{hi} is reversed");
        TimestepWindow { range: Some((lo, hi)) }
    }

    pub fn contains(&self, step: usize) -> bool {
        matches!(self.range, Some((lo, hi)) if (lo..=hi).contains(&step))
    }

    pub fn bounds(&self) -> Option<(usize, usize)> {
        self.range
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_none()
    }

    /// Number of step labels in the window that exist in a `T`-step schedule.
    pub fn active_steps(&self, total: usize) -> usize {
        (0..total).filter(|s| self.contains(*s)).count()
    }

    pub fn within(&self, total: usize) -> bool {
        self.range.is_none_or(|(_, hi)| hi <= total)
    }
}

impl fmt::Display for TimestepWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.range {
            Some((lo, hi)) => write!(f, "{lo}:{hi}"),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for TimestepWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(TimestepWindow::EMPTY);
        }
        let (lo, hi) = s.split_once(':').ok_or_else(|| format!("window `{s}` is not LO:HI"))?;
        let lo: usize = lo.trim().parse().map_err(|e| format!("window `{s}`: {e}"))?;
        let hi: usize = hi.trim().parse().map_err(|e| format!("window `{s}`: {e}"))?;
        if lo > hi {
            return Err(format!("window `{s}` is reversed"));
        }
        Ok(TimestepWindow::new(lo, hi))
    }
}

impl TryFrom<String> for TimestepWindow {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TimestepWindow> for String {
    fn from(w: TimestepWindow) -> Self {
        w.to_string()
    }
}

pub type HookFn<'a, S> =
    Box<dyn FnMut(AttentionTensor<S>) -> Result<AttentionTensor<S>, HookError> + 'a>;

/// Replaces attention inputs of selected layers inside a step window.
pub struct HookSpec<'a, S> {
    pub layers: LayerSelector,
    pub window: TimestepWindow,
    callback: HookFn<'a, S>,
}

impl<'a, S: Scalar> HookSpec<'a, S> {
    pub fn new(
        layers: LayerSelector,
        window: TimestepWindow,
        callback: impl FnMut(AttentionTensor<S>) -> Result<AttentionTensor<S>, HookError> + 'a,
    ) -> Self {
        HookSpec { layers, window, callback: Box::new(callback) }
    }

    pub fn applies(&self, layer: &LayerInfo, step: usize) -> bool {
        self.window.contains(step) && self.layers.matches(layer)
    }
}

/// Runs every applicable hook on `tensor` in order. Used by backbone
/// implementations at each attention layer.
pub fn apply_hooks<S: Scalar>(
    hooks: &mut [HookSpec<'_, S>],
    layer: &LayerInfo,
    mut tensor: AttentionTensor<S>,
) -> Result<AttentionTensor<S>, BackboneError> {
    let step = tensor.timestep;
    for hook in hooks.iter_mut().filter(|h| h.applies(layer, step)) {
        let shape = tensor.q.shape().to_vec();
        tensor = (hook.callback)(tensor).map_err(|source| BackboneError::Hook {
            layer: layer.id.clone(),
            step,
            source,
        })?;
        if tensor.q.shape() != shape.as_slice() {
            return Err(BackboneError::Contract(format!(
                "hook on {} changed query shape {:?} -> {:?}",
                layer.id,
                shape,
                tensor.q.shape()
            )));
        }
        tensor.validate()?;
    }
    Ok(tensor)
}

/// Conditional and unconditional text embeddings for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<S> {
    pub text: String,
    pub cond: ArrayD<S>,
    pub uncond: ArrayD<S>,
}

/// A latent-diffusion noise predictor with attention hooks.
pub trait Denoiser<S: Scalar> {
    fn info(&self) -> &BackboneInfo;

    /// Hookable self-attention layers in execution order.
    fn hookable_layers(&self) -> Result<Vec<LayerInfo>, BackboneError>;

    fn encode(&self, image: &RgbImage) -> Result<Latent<S>, BackboneError>;

    fn decode(&self, latent: &Latent<S>) -> Result<RgbImage, BackboneError>;

    fn embed_prompt(&self, text: &str) -> Result<PromptEmbedding<S>, BackboneError>;

    /// Classifier-free guided noise prediction for the step consuming `z_t`.
    /// Hooks fire once per applicable layer, labelled with step `t - 1`.
    fn predict_noise(
        &self,
        z_t: &Latent<S>,
        t: usize,
        schedule: &DdpmSchedule,
        prompt: &PromptEmbedding<S>,
        guidance_scale: S,
        hooks: &mut [HookSpec<'_, S>],
    ) -> Result<Latent<S>, BackboneError>;

    /// Number of noise predictions run so far.
    fn forward_passes(&self) -> u64;

    /// Records the native attention tensors of the selected layers when the
    /// denoiser consumes `z_t`.
    fn capture_attention(
        &self,
        z_t: &Latent<S>,
        t: usize,
        schedule: &DdpmSchedule,
        prompt: &PromptEmbedding<S>,
        layers: &LayerSelector,
    ) -> Result<Vec<AttentionTensor<S>>, BackboneError> {
        let mut captured = Vec::new();
        {
            let mut hooks = [HookSpec::new(layers.clone(), TimestepWindow::new(t - 1, t - 1), |a: AttentionTensor<S>| {
                captured.push(a.clone());
                Ok(a)
            })];
            self.predict_noise(z_t, t, schedule, prompt, S::one(), &mut hooks)?;
        }
        Ok(captured)
    }

    /// Layers matched by `selector`, in execution order.
    fn selected_layers(&self, selector: &LayerSelector) -> Result<Vec<LayerInfo>, BackboneError> {
        Ok(self.hookable_layers()?.into_iter().filter(|l| selector.matches(l)).collect())
    }
}

fn check_latent<S: Scalar>(handle: &dyn Denoiser<S>, z: &Latent<S>) -> Result<(), BackboneError> {
    let info = handle.info();
    let want = [info.latent_channels, info.latent_size, info.latent_size];
    if z.shape() != want {
        return Err(BackboneError::Contract(format!("latent shape {:?}, expected {:?}", z.shape(), want)));
    }
    Ok(())
}

/// Mean of `z_{t-1}` under the (hooked, guided) noise prediction at `z_t`.
pub fn posterior_mean<S: Scalar>(
    handle: &dyn Denoiser<S>,
    schedule: &DdpmSchedule,
    z_t: &Latent<S>,
    t: usize,
    prompt: &PromptEmbedding<S>,
    guidance_scale: S,
    hooks: &mut [HookSpec<'_, S>],
) -> Result<Latent<S>, BackboneError> {
    if t == 0 || t > schedule.steps() {
        return Err(BackboneError::Contract(format!("step {t} outside 1..={}", schedule.steps())));
    }
    check_latent(handle, z_t)?;
    let eps = handle.predict_noise(z_t, t, schedule, prompt, guidance_scale, hooks)?;
    Ok(schedule.posterior_mean(z_t, &eps, t))
}

/// One reverse step `z_t -> z_{t-1}`: posterior mean plus the additive
/// noise term (zero when `noise` is `None`).
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<S: Scalar>(
    handle: &dyn Denoiser<S>,
    schedule: &DdpmSchedule,
    z_t: &Latent<S>,
    t: usize,
    prompt: &PromptEmbedding<S>,
    guidance_scale: S,
    hooks: &mut [HookSpec<'_, S>],
    noise: Option<&Latent<S>>,
) -> Result<Latent<S>, BackboneError> {
    let mut mean = posterior_mean(handle, schedule, z_t, t, prompt, guidance_scale, hooks)?;
    if let Some(n) = noise {
        if n.shape() != mean.shape() {
            return Err(BackboneError::Contract(format!("noise shape {:?} vs latent {:?}", n.shape(), mean.shape())));
        }
        mean.zip_mut_with(n, |m, &e| *m += e);
    }
    Ok(mean)
}

/// `backbone: {real, mock}` selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backbone", rename_all = "lowercase")]
pub enum BackboneConfig {
    Mock {
        seed: u64,
        #[serde(default = "default_mock_heads")]
        heads: usize,
        #[serde(default = "default_mock_latent")]
        latent_size: usize,
        #[serde(default = "default_mock_head_channels")]
        head_channels: usize,
    },
    Real {
        /// Filesystem path or model-hub identifier of the pretrained weights.
        weights: String,
    },
}

fn default_mock_heads() -> usize {
    2
}
fn default_mock_latent() -> usize {
    16
}
fn default_mock_head_channels() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Mock {
            seed: 7,
            heads: default_mock_heads(),
            latent_size: default_mock_latent(),
            head_channels: default_mock_head_channels(),
        }
    }
}

/// Instantiates the configured backbone and logs its hookable layers.
pub fn build_backbone<S: Scalar>(cfg: &BackboneConfig) -> Result<Box<dyn Denoiser<S>>, BackboneError> {
    let handle: Box<dyn Denoiser<S>> = match cfg {
        BackboneConfig::Mock { seed, heads, latent_size, head_channels } => {
            Box::new(build_mock::<S>(*seed, *heads, *latent_size, *head_channels)?)
        }
        BackboneConfig::Real { weights } => {
            return Err(BackboneError::Unavailable(format!(
                "pretrained backbone `{weights}` requires an inference runtime that this build does not link"
            )))
        }
    };
    for layer in handle.hookable_layers()? {
        log::info!(
            "attention layer {} ({:?}, {}x{}){}",
            layer.id,
            layer.block,
            layer.resolution,
            layer.resolution,
            if layer.flagged { " [flagged]" } else { "" }
        );
    }
    Ok(handle)
}
