//! Array types exchanged between the denoiser, the hooks and the composition code.

use ndarray::{Array3, Array4};

use crate::backbone::BackboneError;
use crate::scalar::Scalar;

/// Latent code laid out as `[channels, height, width]`.
pub type Latent<S> = Array3<S>;

/// Per-head feature block laid out as `[heads, height, width, head_channels]`.
pub type HeadFeatures<S> = Array4<S>;

/// Query, key and value features of one self-attention layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor<S> {
    pub q: HeadFeatures<S>,
    pub k: HeadFeatures<S>,
    pub v: HeadFeatures<S>,
    pub layer_id: String,
    /// Label of the denoising step (index of the latent it produces).
    pub timestep: usize,
    /// Contrast factor applied to the post-softmax attention map; `1` is the native map.
    pub contrast: S,
}

impl<S: Scalar> AttentionTensor<S> {
    pub fn new(
        q: HeadFeatures<S>,
        k: HeadFeatures<S>,
        v: HeadFeatures<S>,
        layer_id: impl Into<String>,
        timestep: usize,
    ) -> Result<Self, BackboneError> {
        let t = AttentionTensor { q, k, v, layer_id: layer_id.into(), timestep, contrast: S::one() };
        t.validate()?;
        Ok(t)
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn head_channels(&self) -> usize {
        self.q.shape()[3]
    }

    /// Spatial size `(height, width)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.q.shape()[1], self.q.shape()[2])
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.q.shape() != self.k.shape() || self.q.shape() != self.v.shape() {
            return Err(BackboneError::Contract(format!(
                "layer {}: q/k/v shapes differ: {:?} {:?} {:?}",
                self.layer_id,
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        let finite = |a: &HeadFeatures<S>| a.iter().all(|x| x.is_finite());
        if !(finite(&self.q) && finite(&self.k) && finite(&self.v)) {
            return Err(BackboneError::Contract(format!(
                "layer {} step {}: non-finite attention features",
                self.layer_id, self.timestep
            )));
        }
        if !(self.contrast > S::zero()) {
            return Err(BackboneError::Contract(format!(
                "layer {}: contrast factor must be positive",
                self.layer_id
            )));
        }
        Ok(())
    }
}

pub fn all_finite<S: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<S, D>) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn max_abs_diff<S: Scalar, D: ndarray::Dimension>(
    a: &ndarray::Array<S, D>,
    b: &ndarray::Array<S, D>,
) -> S {
    a.iter().zip(b.iter()).fold(S::zero(), |m, (x, y)| m.max((*x - *y).abs()))
}
