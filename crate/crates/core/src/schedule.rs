//! Variance schedules, the closed-form forward process and timestep plans.
//!
//! Timesteps are 1-based throughout (`1..=T`), matching the usual DDPM
//! notation; the tables are stored 0-based internally.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_sq: Vec<f64>,
}

/// Parameters of a linear schedule; this is what configs and checkpoints
/// record, the tables are rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<VarianceSchedule> {
        build_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)
    }
}

/// Linear beta schedule from `beta_start` (t = 1) to `beta_end` (t = T).
///
/// The reverse-process variance is the DDPM posterior variance
/// `((1 - abar[t-1]) / (1 - abar[t])) * beta[t]` with `abar[0] = 1`. That
/// expression is zero at `t = 1`, so the first entry is clipped to the second
/// one (for `T = 1` it falls back to `beta[1]`); this keeps every ELBO weight
/// finite.
pub fn build_linear_schedule(
    num_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<VarianceSchedule> {
    if num_timesteps == 0 {
        return Err(Error::param("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let t_max = num_timesteps;
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let mut sigma_sq: Vec<f64> = (0..t_max)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    sigma_sq[0] = if t_max > 1 { sigma_sq[1] } else { beta[0] };
    Ok(VarianceSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma_sq,
    })
}

impl VarianceSchedule {
    pub fn num_timesteps(&self) -> usize {
        self.beta.len()
    }

    #[inline]
    fn idx(&self, t: usize) -> usize {
        assert!(
            t >= 1 && t <= self.beta.len(),
            "timestep {t} outside 1..={}",
            self.beta.len()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// `abar[t]` extended with `abar[0] = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.sigma_sq[self.idx(t)]
    }

    /// Weight of the noise-matching term in the variational bound,
    /// `beta^2 / (2 sigma^2 alpha (1 - abar))`.
    pub fn elbo_weight(&self, t: usize) -> f64 {
        let i = self.idx(t);
        let b = self.beta[i];
        b * b / (2.0 * self.sigma_sq[i] * self.alpha[i] * (1.0 - self.alpha_bar[i]))
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            num_timesteps: self.beta.len(),
            beta_start: self.beta[0],
            beta_end: *self.beta.last().unwrap(),
        }
    }
}

/// `sqrt(abar[t]) x + sqrt(1 - abar[t]) eps`.
pub fn forward_diffuse(
    x: &[f64],
    t: usize,
    eps: &[f64],
    sched: &VarianceSchedule,
) -> Result<Vec<f64>> {
    check_len(x.len(), eps.len(), "noise vector length")?;
    if t == 0 || t > sched.num_timesteps() {
        return Err(Error::param(format!(
            "timestep {t} outside 1..={}",
            sched.num_timesteps()
        )));
    }
    Ok(diffuse_with(x, eps, sched.alpha_bar(t)))
}

#[inline]
pub(crate) fn diffuse_with(x: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x.iter().zip(eps).map(|(xi, ei)| a * xi + s * ei).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepStrategy {
    Uniform,
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    pub count: usize,
    pub strategy: TimestepStrategy,
}

impl TimestepPlan {
    pub fn uniform(count: usize) -> Self {
        Self {
            count,
            strategy: TimestepStrategy::Uniform,
        }
    }

    pub fn cumulative(count: usize) -> Self {
        Self {
            count,
            strategy: TimestepStrategy::Cumulative,
        }
    }

    pub fn timesteps(&self, num_timesteps: usize) -> Result<Vec<usize>> {
        select_timesteps(num_timesteps, *self)
    }
}

/// Uniform: `1 + i * floor(T / n)` for `i in 0..n`. Cumulative: `1..=n`.
pub fn select_timesteps(num_timesteps: usize, plan: TimestepPlan) -> Result<Vec<usize>> {
    if plan.count == 0 || plan.count > num_timesteps {
        return Err(Error::param(format!(
            "timestep count {} must be in 1..={num_timesteps}",
            plan.count
        )));
    }
    Ok(match plan.strategy {
        TimestepStrategy::Uniform => {
            let stride = num_timesteps / plan.count;
            (0..plan.count).map(|i| 1 + i * stride).collect()
        }
        TimestepStrategy::Cumulative => (1..=plan.count).collect(),
    })
}
