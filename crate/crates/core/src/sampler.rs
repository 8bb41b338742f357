//! Deterministic DDIM sampling.

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::rng::{Purpose, StreamKey};
use crate::schedule::VarianceSchedule;

/// Noisy states visited by the sampler, `(x_t, t)` in visiting order
/// (descending `t`).
pub type Trajectory = Vec<(Vec<f64>, usize)>;

/// The `steps` timesteps visited, descending: `1 + i * floor(T / steps)`.
pub fn ddim_timesteps(num_timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_timesteps {
        return Err(Error::param(format!(
            "DDIM steps must be in 1..={num_timesteps}, got {steps}"
        )));
    }
    let stride = num_timesteps / steps;
    Ok((0..steps).rev().map(|i| 1 + i * stride).collect())
}

pub fn ddim_sample<M: Denoiser + ?Sized>(
    model: &M,
    sched: &VarianceSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    ddim_sample_inner(model, sched, steps, seed, false).map(|(x, _)| x)
}

/// Like [`ddim_sample`] but also returns every `(x_t, t)` fed to the model.
pub fn ddim_sample_with_trajectory<M: Denoiser + ?Sized>(
    model: &M,
    sched: &VarianceSchedule,
    steps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Trajectory)> {
    ddim_sample_inner(model, sched, steps, seed, true)
}

fn ddim_sample_inner<M: Denoiser + ?Sized>(
    model: &M,
    sched: &VarianceSchedule,
    steps: usize,
    seed: u64,
    record: bool,
) -> Result<(Vec<f64>, Trajectory)> {
    let timesteps = ddim_timesteps(sched.num_timesteps(), steps)?;
    let mut x = StreamKey::new(seed, Purpose::Sampling)
        .stream()
        .gaussian_vec(model.data_dim());
    let mut trajectory = Vec::new();
    for (i, &t) in timesteps.iter().enumerate() {
        if record {
            trajectory.push((x.clone(), t));
        }
        let eps = model.predict(&x, t);
        let ab = sched.alpha_bar(t);
        let prev_t = timesteps.get(i + 1).copied().unwrap_or(0);
        let ab_prev = sched.alpha_bar_or_one(prev_t);
        // x0 prediction, then re-noise deterministically to the previous level
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x
            .iter()
            .zip(&eps)
            .map(|(xt, e)| {
                let x0 = (xt - sb * e) / sa;
                pa * x0 + pb * e
            })
            .collect();
    }
    Ok((x, trajectory))
}
