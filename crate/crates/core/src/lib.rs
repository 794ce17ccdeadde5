//! Sketch-style sign illustrations from video: attention-injected diffusion
//! style transfer, query-space overlay of start and end poses, and fitted
//! B-spline motion arrows.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod inversion;
pub mod orchestrator;
pub mod overlay;
pub mod perception;
pub mod scalar;
pub mod style;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LatentF32 = tensor::Latent<f32>;
pub type LatentF64 = tensor::Latent<f64>;
pub type AttentionTensorF32 = tensor::AttentionTensor<f32>;
pub type AttentionTensorF64 = tensor::AttentionTensor<f64>;
pub type LatentTrajectoryF32 = inversion::LatentTrajectory<f32>;
pub type LatentTrajectoryF64 = inversion::LatentTrajectory<f64>;
pub type MockBackboneF32 = backbone::MockBackbone<f32>;
pub type MockBackboneF64 = backbone::MockBackbone<f64>;
pub type SplineCurveF32 = trajectory::SplineCurve<f32>;
pub type SplineCurveF64 = trajectory::SplineCurve<f64>;
