//! Stochastic DDPM sampler over a subsampled training schedule.
//!
//! Inference step `t` runs from `T` (pure noise) down to `1`; step `t` maps
//! `z_t` to `z_{t-1}`. Cumulative alphas come from the scaled-linear beta
//! schedule of latent diffusion models (1000 training steps).

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Latent;

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmSchedule {
    steps: usize,
    /// `alpha_bar[t]` for inference steps `t = 0..=T`; `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// Training timestep fed to the denoiser at inference step `t` (index 0 unused).
    train_timestep: Vec<usize>,
}

impl DdpmSchedule {
    /// Panics if `steps` is zero or exceeds the training schedule.
    pub fn new(steps: usize) -> Self {
        assert!((1..=TRAIN_TIMESTEPS).contains(&steps), "steps must be in 1..=1000");
        let (s, e) = (BETA_START.sqrt(), BETA_END.sqrt());
        let mut cumprod = Vec::with_capacity(TRAIN_TIMESTEPS);
        let mut acc = 1.0f64;
        for i in 0..TRAIN_TIMESTEPS {
            let b = s + (e - s) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64;
            acc *= 1.0 - b * b;
            cumprod.push(acc);
        }
        let mut alpha_bar = vec![1.0];
        let mut train_timestep = vec![0];
        for t in 1..=steps {
            let idx = t * TRAIN_TIMESTEPS / steps - 1;
            alpha_bar.push(cumprod[idx]);
            train_timestep.push(idx);
        }
        DdpmSchedule { steps, alpha_bar, train_timestep }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn train_timestep(&self, t: usize) -> usize {
        self.train_timestep[t]
    }

    /// Posterior standard deviation of step `t` (zero for the final step).
    pub fn sigma(&self, t: usize) -> f64 {
        let (a_t, a_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev);
        var.max(0.0).sqrt()
    }

    /// `sqrt(a_t) x0 + sqrt(1 - a_t) eps`
    pub fn add_noise<S: Scalar>(&self, x0: &Latent<S>, eps: &Latent<S>, t: usize) -> Latent<S> {
        let a = self.alpha_bar[t];
        let (ca, cb) = (S::lit(a.sqrt()), S::lit((1.0 - a).sqrt()));
        let mut out = x0.mapv(|x| x * ca);
        out.zip_mut_with(eps, |o, &e| *o += cb * e);
        out
    }

    /// Mean of `z_{t-1}` given `z_t` and the predicted noise.
    pub fn posterior_mean<S: Scalar>(&self, z_t: &Latent<S>, eps: &Latent<S>, t: usize) -> Latent<S> {
        let (a_t, a_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let sigma = self.sigma(t);
        let inv_sqrt_a = S::lit(1.0 / a_t.sqrt());
        let sqrt_1ma = S::lit((1.0 - a_t).sqrt());
        let c_x0 = S::lit(a_prev.sqrt());
        let c_dir = S::lit((1.0 - a_prev - sigma * sigma).max(0.0).sqrt());
        let mut out = z_t.clone();
        out.zip_mut_with(eps, |z, &e| {
            let x0 = (*z - sqrt_1ma * e) * inv_sqrt_a;
            *z = c_x0 * x0 + c_dir * e;
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = DdpmSchedule::new(100);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.train_timestep(100), 999);
        assert_eq!(s.train_timestep(1), 9);
        assert!(s.alpha_bar(100) < 0.01);
        assert_eq!(s.sigma(1), 0.0);
        for t in 1..100 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        let one = DdpmSchedule::new(1);
        assert_eq!(one.train_timestep(1), 999);
    }

    #[test]
    fn final_step_mean_is_clean_estimate() {
        let s = DdpmSchedule::new(10);
        let x0 = ndarray::Array3::from_elem((1, 2, 2), 0.5f64);
        let eps = ndarray::Array3::from_elem((1, 2, 2), -0.25f64);
        let z1 = s.add_noise(&x0, &eps, 1);
        let mean = s.posterior_mean(&z1, &eps, 1);
        for v in mean.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
