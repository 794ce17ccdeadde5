//! Edit-friendly inversion: every intermediate latent `z_t` is drawn
//! independently from the forward process, and the additive noise of each
//! reverse step is solved for so that replaying the stored noises from
//! `z_T` walks back through the same latents.
//!
//! The stored noise of step `t` is the full additive term
//! `z_{t-1} - mean(z_t)`, split into a main term and a compensation term so
//! that `(mean + term) + correction` reproduces `z_{t-1}` bit for bit even
//! when the mean is far from the target. Hook-free replay is therefore exact
//! for any deterministic backbone.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{posterior_mean, DdpmSchedule, Denoiser, HookSpec, LayerSelector, PromptEmbedding};
use crate::error::{Error, Result};
use crate::scalar::{exact_addend, Scalar};
use crate::tensor::{all_finite, AttentionTensor, Latent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Img,
    Edges,
    Style,
    #[serde(rename = "illustration_1")]
    Illustration1,
    #[serde(rename = "illustration_2")]
    Illustration2,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Img => "img",
            SourceTag::Edges => "edges",
            SourceTag::Style => "style",
            SourceTag::Illustration1 => "illustration_1",
            SourceTag::Illustration2 => "illustration_2",
        }
    }

    /// Stable per-tag offset mixed into the inversion seed.
    pub fn seed_offset(self) -> u64 {
        match self {
            SourceTag::Img => 0x11,
            SourceTag::Edges => 0x22,
            SourceTag::Style => 0x33,
            SourceTag::Illustration1 => 0x44,
            SourceTag::Illustration2 => 0x55,
        }
    }
}

/// Additive noise of one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise<S> {
    pub term: Latent<S>,
    /// Rounding compensation, present only where `mean + term` misses the target.
    pub correction: Option<Latent<S>>,
}

impl<S: Scalar> StepNoise<S> {
    /// Adds the noise to a posterior mean in place.
    pub fn apply(&self, mean: &mut Latent<S>) {
        mean.zip_mut_with(&self.term, |a, &b| *a += b);
        if let Some(c) = &self.correction {
            mean.zip_mut_with(c, |a, &b| *a += b);
        }
    }
}

/// Latents `z[0..=T]` and additive step noises for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory<S> {
    pub z: Vec<Latent<S>>,
    /// `noise[t - 1]` is added by the step consuming `z[t]`.
    pub noise: Vec<StepNoise<S>>,
    pub source_tag: SourceTag,
    pub seed: u64,
    pub prompt: String,
    pub guidance_scale: S,
}

impl<S: Scalar> LatentTrajectory<S> {
    pub fn steps(&self) -> usize {
        self.noise.len()
    }

    /// Additive noise of the step consuming `z[t]`, `t` in `1..=T`.
    pub fn noise_at(&self, t: usize) -> &StepNoise<S> {
        &self.noise[t - 1]
    }

    pub fn latent_shape(&self) -> &[usize] {
        self.z[0].shape()
    }

    pub fn schedule(&self) -> DdpmSchedule {
        DdpmSchedule::new(self.steps())
    }
}

/// Inverts `image_latent` over a `steps`-step schedule.
#[allow(clippy::too_many_arguments)]
pub fn invert<S: Scalar>(
    handle: &dyn Denoiser<S>,
    image_latent: &Latent<S>,
    steps: usize,
    prompt: &PromptEmbedding<S>,
    guidance_scale: S,
    seed: u64,
    source_tag: SourceTag,
) -> Result<LatentTrajectory<S>> {
    if steps == 0 {
        return Err(Error::Validation("inversion needs at least one step".into()));
    }
    let info = handle.info();
    let want = [info.latent_channels, info.latent_size, info.latent_size];
    if image_latent.shape() != want {
        return Err(Error::Shape(format!("latent {:?}, backbone expects {:?}", image_latent.shape(), want)));
    }
    if !all_finite(image_latent) {
        return Err(Error::Inversion { step: 0, reason: "non-finite source latent".into() });
    }
    let schedule = DdpmSchedule::new(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward: Vec<Latent<S>> = Vec::with_capacity(steps + 1);
    forward.push(image_latent.clone());
    for t in 1..=steps {
        let eps = Array3::from_shape_simple_fn(image_latent.raw_dim(), || {
            let x: f64 = StandardNormal.sample(&mut rng);
            S::lit(x)
        });
        forward.push(schedule.add_noise(image_latent, &eps, t));
    }

    let mut z = vec![Latent::<S>::zeros(image_latent.raw_dim()); steps + 1];
    let mut noise = Vec::with_capacity(steps);
    z[steps] = forward[steps].clone();
    for t in (1..=steps).rev() {
        let mean = posterior_mean(handle, &schedule, &z[t], t, prompt, guidance_scale, &mut [])?;
        if !all_finite(&mean) {
            return Err(Error::Inversion { step: t, reason: "non-finite posterior mean".into() });
        }
        let target = &forward[t - 1];
        let mut term = mean.clone();
        ndarray::Zip::from(&mut term).and(&mean).and(target).for_each(|r, &m, &x| *r = exact_addend(m, x));
        let mut next = mean;
        next.zip_mut_with(&term, |a, &b| *a += b);
        let correction = if next == *target {
            None
        } else {
            let mut c = next.clone();
            ndarray::Zip::from(&mut c).and(&next).and(target).for_each(|r, &y, &x| {
                *r = if y == x { S::zero() } else { exact_addend(y, x) }
            });
            next.zip_mut_with(&c, |a, &b| *a += b);
            Some(c)
        };
        if !all_finite(&next) {
            return Err(Error::Inversion { step: t, reason: "non-finite latent".into() });
        }
        z[t - 1] = next;
        noise.push(StepNoise { term, correction });
    }
    noise.reverse();
    Ok(LatentTrajectory { z, noise, source_tag, seed, prompt: prompt.text.clone(), guidance_scale })
}

/// Denoises from `z_start` at step `start_t` down to `z_0` using the stored
/// noises of `traj`. Before each step `plan(t, z_t)` may adjust `z_t` and
/// returns the hooks for that step. Returns every visited latent, indexed by
/// `t` (entries above `start_t` are empty arrays).
pub fn replay_with<'a, S, F>(
    handle: &dyn Denoiser<S>,
    traj: &LatentTrajectory<S>,
    z_start: Latent<S>,
    start_t: usize,
    prompt: &PromptEmbedding<S>,
    guidance_scale: S,
    mut plan: F,
) -> Result<Vec<Latent<S>>>
where
    S: Scalar,
    F: FnMut(usize, &mut Latent<S>) -> Result<Vec<HookSpec<'a, S>>>,
{
    let steps = traj.steps();
    if start_t > steps {
        return Err(Error::Validation(format!("start step {start_t} beyond trajectory length {steps}")));
    }
    if z_start.shape() != traj.latent_shape() {
        return Err(Error::Shape(format!("start latent {:?} vs trajectory {:?}", z_start.shape(), traj.latent_shape())));
    }
    let schedule = traj.schedule();
    let mut visited = vec![Latent::<S>::zeros((0, 0, 0)); steps + 1];
    let mut z = z_start;
    for t in (1..=start_t).rev() {
        let mut hooks = plan(t, &mut z)?;
        visited[t] = z.clone();
        let mut next = posterior_mean(handle, &schedule, &z, t, prompt, guidance_scale, &mut hooks)?;
        traj.noise_at(t).apply(&mut next);
        if !all_finite(&next) {
            return Err(Error::Inversion { step: t, reason: "non-finite latent during replay".into() });
        }
        z = next;
    }
    visited[0] = z;
    Ok(visited)
}

/// Replays `traj` from `z[start_t]` with a fixed hook set.
pub fn replay<S: Scalar>(
    handle: &dyn Denoiser<S>,
    traj: &LatentTrajectory<S>,
    hooks: &mut [HookSpec<'_, S>],
    prompt: &PromptEmbedding<S>,
    guidance_scale: S,
    start_t: usize,
) -> Result<Latent<S>> {
    if start_t > traj.steps() {
        return Err(Error::Validation(format!("start step {start_t} beyond trajectory length {}", traj.steps())));
    }
    let schedule = traj.schedule();
    let mut z = traj.z[start_t].clone();
    for t in (1..=start_t).rev() {
        let mut next = posterior_mean(handle, &schedule, &z, t, prompt, guidance_scale, hooks)?;
        traj.noise_at(t).apply(&mut next);
        if !all_finite(&next) {
            return Err(Error::Inversion { step: t, reason: "non-finite latent during replay".into() });
        }
        z = next;
    }
    Ok(z)
}

/// Native attention tensors of the selected layers when the denoiser consumes
/// the stored `z[t]` of `traj`.
pub fn capture<S: Scalar>(
    handle: &dyn Denoiser<S>,
    traj: &LatentTrajectory<S>,
    t: usize,
    prompt: &PromptEmbedding<S>,
    layers: &LayerSelector,
) -> Result<Vec<AttentionTensor<S>>> {
    Ok(handle.capture_attention(&traj.z[t], t, &traj.schedule(), prompt, layers)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryManifest {
    shape: [usize; 3],
    steps: usize,
    seed: u64,
    source_tag: SourceTag,
    prompt: String,
    guidance_scale: f64,
    dtype: String,
    /// Steps that carry an `n_{t:03}.corr.bin` compensation file.
    #[serde(default)]
    corrections: Vec<usize>,
    checksum: String,
}

fn latent_bytes<S: Scalar>(a: &Latent<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for v in a.iter() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

fn latent_from_bytes<S: Scalar>(bytes: &[u8], shape: [usize; 3], path: &Path) -> Result<Latent<S>> {
    let n = shape.iter().product::<usize>();
    if bytes.len() != n * 4 {
        return Err(Error::Validation(format!("{}: expected {} bytes, found {}", path.display(), n * 4, bytes.len())));
    }
    let vals: Vec<S> = bytes
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Array3::from_shape_vec(shape, vals).map_err(|e| Error::Shape(e.to_string()))
}

impl<S: Scalar> LatentTrajectory<S> {
    /// Writes `manifest.json` plus little-endian float32 `z_{t:03}.bin` and
    /// `n_{t:03}.bin` files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut hasher = Sha256::new();
        let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
            hasher.update(name.as_bytes());
            hasher.update(&bytes);
            let path = dir.join(&name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))
        };
        for (t, z) in self.z.iter().enumerate() {
            write(format!("z_{t:03}.bin"), latent_bytes(z))?;
        }
        let mut corrections = Vec::new();
        for (i, n) in self.noise.iter().enumerate() {
            write(format!("n_{:03}.bin", i + 1), latent_bytes(&n.term))?;
            if let Some(c) = &n.correction {
                write(format!("n_{:03}.corr.bin", i + 1), latent_bytes(c))?;
                corrections.push(i + 1);
            }
        }
        let s = self.latent_shape();
        let manifest = TrajectoryManifest {
            shape: [s[0], s[1], s[2]],
            steps: self.steps(),
            seed: self.seed,
            source_tag: self.source_tag,
            prompt: self.prompt.clone(),
            guidance_scale: self.guidance_scale.to_f64_lossy(),
            dtype: "float32-le".into(),
            corrections,
            checksum: hex::encode(hasher.finalize()),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("trajectory manifest", e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a trajectory written by [`LatentTrajectory::save`], verifying its checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: TrajectoryManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let mut hasher = Sha256::new();
        let mut read = |name: String| -> Result<Latent<S>> {
            let p = dir.join(&name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            hasher.update(name.as_bytes());
            hasher.update(&bytes);
            latent_from_bytes(&bytes, m.shape, &p)
        };
        let z = (0..=m.steps).map(|t| read(format!("z_{t:03}.bin"))).collect::<Result<Vec<_>>>()?;
        let noise = (1..=m.steps)
            .map(|t| {
                let term = read(format!("n_{t:03}.bin"))?;
                let correction =
                    if m.corrections.contains(&t) { Some(read(format!("n_{t:03}.corr.bin"))?) } else { None };
                Ok(StepNoise { term, correction })
            })
            .collect::<Result<Vec<_>>>()?;
        let checksum = hex::encode(hasher.finalize());
        if checksum != m.checksum {
            return Err(Error::Validation(format!("trajectory {} checksum mismatch", dir.display())));
        }
        Ok(LatentTrajectory {
            z,
            noise,
            source_tag: m.source_tag,
            seed: m.seed,
            prompt: m.prompt,
            guidance_scale: S::lit(m.guidance_scale),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_mock, MockBackbone, TimestepWindow};

    fn setup() -> (MockBackbone<f32>, PromptEmbedding<f32>, Latent<f32>) {
        let m = build_mock::<f32>(7, 2, 8, 4).unwrap();
        let p = m.embed_prompt("a woman").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Array3::from_shape_simple_fn((3, 8, 8), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            (0.5 + 0.2 * v) as f32
        });
        (m, p, x)
    }

    #[test]
    fn replay_reconstructs_exactly() {
        let (m, p, x) = setup();
        let traj = invert(&m, &x, 5, &p, 3.5, 1, SourceTag::Img).unwrap();
        assert_eq!(traj.z[0], x);
        assert_eq!(traj.z.len(), 6);
        let out = replay(&m, &traj, &mut [], &p, 3.5, 5).unwrap();
        assert_eq!(out, traj.z[0]);
        assert_eq!(replay(&m, &traj, &mut [], &p, 3.5, 0).unwrap(), traj.z[0]);
        assert!(replay(&m, &traj, &mut [], &p, 3.5, 6).is_err());
    }

    #[test]
    fn single_step_boundary() {
        let (m, p, x) = setup();
        let traj = invert(&m, &x, 1, &p, 3.5, 9, SourceTag::Edges).unwrap();
        assert_eq!(traj.z.len(), 2);
        assert_eq!(traj.noise.len(), 1);
        assert_eq!(replay(&m, &traj, &mut [], &p, 3.5, 1).unwrap(), x);
    }

    #[test]
    fn invert_rejects_bad_input() {
        let (m, p, x) = setup();
        assert!(invert(&m, &x, 0, &p, 3.5, 1, SourceTag::Img).is_err());
        let wrong = Array3::<f32>::zeros((3, 4, 4));
        assert!(invert(&m, &wrong, 3, &p, 3.5, 1, SourceTag::Img).is_err());
        let mut nan = x.clone();
        nan[[0, 0, 0]] = f32::NAN;
        assert!(matches!(invert(&m, &nan, 3, &p, 3.5, 1, SourceTag::Img), Err(Error::Inversion { step: 0, .. })));
    }

    #[test]
    fn prefix_untouched_outside_window() {
        let (m, p, x) = setup();
        let traj = invert(&m, &x, 20, &p, 3.5, 3, SourceTag::Img).unwrap();
        let plain = replay_with(&m, &traj, traj.z[20].clone(), 20, &p, 3.5, |_, _| Ok(Vec::new())).unwrap();
        let hooked = replay_with(&m, &traj, traj.z[20].clone(), 20, &p, 3.5, |_, _| {
            Ok(vec![HookSpec::new(LayerSelector::Flagged, TimestepWindow::new(0, 7), |mut a: AttentionTensor<f32>| {
                a.q.mapv_inplace(|v| -v);
                Ok(a)
            })])
        })
        .unwrap();
        for t in 8..=20 {
            assert_eq!(plain[t], hooked[t], "step {t}");
        }
        assert_ne!(plain[0], hooked[0]);
    }

    #[test]
    fn persistence_round_trip() {
        let (m, p, x) = setup();
        let traj = invert(&m, &x, 4, &p, 3.5, 5, SourceTag::Style).unwrap();
        let dir = tempfile::tempdir().unwrap();
        traj.save(dir.path()).unwrap();
        assert!(dir.path().join("z_004.bin").exists());
        assert!(dir.path().join("n_001.bin").exists());
        let back = LatentTrajectory::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, traj);
        fs::write(dir.path().join("n_002.bin"), vec![0u8; 3 * 8 * 8 * 4]).unwrap();
        assert!(LatentTrajectory::<f32>::load(dir.path()).is_err());
    }
}
