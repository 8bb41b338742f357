//! The scalar functionals of the denoiser that can be evaluated or
//! differentiated: the training objectives (`Simple`, `ELBO`) and the
//! output-norm family (`Square`, `Avg`, p-norms) plus the one-parameter
//! interpolation between `Square` and `Simple - Square`.
//!
//! Expectations over `t` are plain averages over a [`TimestepPlan`]; for each
//! timestep `noises_per_timestep` Gaussians are drawn from the stream keyed by
//! `(base key, t, draw index)`. Summation runs in ascending `t`, then
//! ascending draw index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{Denoiser, DifferentiableDenoiser};
use crate::rng::StreamKey;
use crate::schedule::{diffuse_with, TimestepPlan, VarianceSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PNorm {
    L1,
    L2,
    Inf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Simple,
    Elbo,
    Square,
    Avg,
    PNorm(PNorm),
    /// `eta * Square + (1 - eta) * (Simple - Square)`.
    Interpolated(f64),
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Simple => f.write_str("simple"),
            LossKind::Elbo => f.write_str("elbo"),
            LossKind::Square => f.write_str("square"),
            LossKind::Avg => f.write_str("avg"),
            LossKind::PNorm(PNorm::L1) => f.write_str("l1"),
            LossKind::PNorm(PNorm::L2) => f.write_str("l2"),
            LossKind::PNorm(PNorm::Inf) => f.write_str("linf"),
            LossKind::Interpolated(eta) => write!(f, "eta={eta}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "simple" => LossKind::Simple,
            "elbo" => LossKind::Elbo,
            "square" => LossKind::Square,
            "avg" => LossKind::Avg,
            "l1" | "1-norm" => LossKind::PNorm(PNorm::L1),
            "l2" | "2-norm" => LossKind::PNorm(PNorm::L2),
            "linf" | "inf-norm" => LossKind::PNorm(PNorm::Inf),
            other => {
                let eta_text = other
                    .strip_prefix("eta=")
                    .or_else(|| other.strip_prefix("eta:"))
                    .ok_or_else(|| Error::param(format!("unknown loss kind '{s}'")))?;
                let eta: f64 = eta_text
                    .parse()
                    .map_err(|_| Error::param(format!("bad eta in '{s}'")))?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::param(format!("eta must lie in [0, 1], got {eta}")));
                }
                LossKind::Interpolated(eta)
            }
        })
    }
}

impl Serialize for LossKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LossKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub timestep_plan: TimestepPlan,
    pub noises_per_timestep: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind, timestep_plan: TimestepPlan, noises_per_timestep: usize) -> Self {
        Self {
            kind,
            timestep_plan,
            noises_per_timestep,
        }
    }

    pub fn validate(&self, sched: &VarianceSchedule) -> Result<()> {
        if self.noises_per_timestep == 0 {
            return Err(Error::param("noises_per_timestep must be at least 1"));
        }
        if let LossKind::Interpolated(eta) = self.kind {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::param(format!("eta must lie in [0, 1], got {eta}")));
            }
        }
        self.timestep_plan.timesteps(sched.num_timesteps()).map(|_| ())
    }

    pub fn with_kind(mut self, kind: LossKind) -> Self {
        self.kind = kind;
        self
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Value of the integrand for one `(t, eps)` draw.
pub fn point_loss(kind: LossKind, eps_pred: &[f64], eps: &[f64], elbo_weight: f64) -> f64 {
    let residual = || -> f64 {
        eps.iter()
            .zip(eps_pred)
            .map(|(e, p)| (e - p) * (e - p))
            .sum()
    };
    match kind {
        LossKind::Simple => residual(),
        LossKind::Elbo => elbo_weight * residual(),
        LossKind::Square => sq_norm(eps_pred),
        LossKind::Avg => eps_pred.iter().sum::<f64>() / eps_pred.len() as f64,
        LossKind::PNorm(PNorm::L1) => eps_pred.iter().map(|v| v.abs()).sum(),
        LossKind::PNorm(PNorm::L2) => sq_norm(eps_pred).sqrt(),
        LossKind::PNorm(PNorm::Inf) => eps_pred.iter().fold(0.0, |m, v| m.max(v.abs())),
        LossKind::Interpolated(eta) => {
            let square = sq_norm(eps_pred);
            eta * square + (1.0 - eta) * (residual() - square)
        }
    }
}

/// `2 (eta * eps_pred - (1 - eta) * eps)`, the vector pulled back through the
/// network for the interpolated functional.
pub fn interpolated_grad_target(eta: f64, eps_pred: &[f64], eps: &[f64]) -> Vec<f64> {
    eps_pred
        .iter()
        .zip(eps)
        .map(|(p, e)| 2.0 * (eta * p - (1.0 - eta) * e))
        .collect()
}

/// Derivative of [`point_loss`] with respect to `eps_pred`. Norms use the
/// zero subgradient at their kinks; the infinity norm picks the first
/// maximising coordinate.
pub fn point_cotangent(kind: LossKind, eps_pred: &[f64], eps: &[f64], elbo_weight: f64) -> Vec<f64> {
    match kind {
        LossKind::Simple => eps_pred.iter().zip(eps).map(|(p, e)| 2.0 * (p - e)).collect(),
        LossKind::Elbo => eps_pred
            .iter()
            .zip(eps)
            .map(|(p, e)| 2.0 * elbo_weight * (p - e))
            .collect(),
        LossKind::Square => eps_pred.iter().map(|p| 2.0 * p).collect(),
        LossKind::Avg => vec![1.0 / eps_pred.len() as f64; eps_pred.len()],
        LossKind::PNorm(PNorm::L1) => eps_pred
            .iter()
            .map(|&p| if p == 0.0 { 0.0 } else { p.signum() })
            .collect(),
        LossKind::PNorm(PNorm::L2) => {
            let norm = sq_norm(eps_pred).sqrt();
            if norm == 0.0 {
                vec![0.0; eps_pred.len()]
            } else {
                eps_pred.iter().map(|p| p / norm).collect()
            }
        }
        LossKind::PNorm(PNorm::Inf) => {
            let mut out = vec![0.0; eps_pred.len()];
            let mut best = 0.0;
            let mut arg = None;
            for (i, p) in eps_pred.iter().enumerate() {
                if p.abs() > best {
                    best = p.abs();
                    arg = Some(i);
                }
            }
            if let Some(i) = arg {
                out[i] = eps_pred[i].signum();
            }
            out
        }
        LossKind::Interpolated(eta) => interpolated_grad_target(eta, eps_pred, eps),
    }
}

/// The noise draw used for timestep `t`, draw `draw` under `key`.
pub fn noise_draw(key: &StreamKey, t: usize, draw: usize, dim: usize) -> Vec<f64> {
    key.timestep(t as u64)
        .draw(draw as u64)
        .stream()
        .gaussian_vec(dim)
}

/// Monte-Carlo estimate of the loss functional for one data vector.
pub fn eval_loss<M: Denoiser + ?Sized>(
    model: &M,
    x: &[f64],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    key: &StreamKey,
) -> Result<f64> {
    spec.validate(sched)?;
    crate::error::check_len(model.data_dim(), x.len(), "data vector")?;
    let timesteps = spec.timestep_plan.timesteps(sched.num_timesteps())?;
    let mut total = 0.0;
    for &t in &timesteps {
        total += loss_at_timestep(model, x, spec.kind, t, spec.noises_per_timestep, sched, key);
    }
    Ok(total / timesteps.len() as f64)
}

/// Average of the integrand over the draws at a single timestep.
pub fn loss_at_timestep<M: Denoiser + ?Sized>(
    model: &M,
    x: &[f64],
    kind: LossKind,
    t: usize,
    noises: usize,
    sched: &VarianceSchedule,
    key: &StreamKey,
) -> f64 {
    let alpha_bar = sched.alpha_bar(t);
    let w = if kind == LossKind::Elbo {
        sched.elbo_weight(t)
    } else {
        1.0
    };
    let mut sum = 0.0;
    for draw in 0..noises {
        let eps = noise_draw(key, t, draw, x.len());
        let x_t = diffuse_with(x, &eps, alpha_bar);
        let pred = model.predict(&x_t, t);
        sum += point_loss(kind, &pred, &eps, w);
    }
    sum / noises as f64
}

/// Exact gradient of [`eval_loss`] with respect to the model parameters,
/// using the same draws.
pub fn per_sample_grad<M: DifferentiableDenoiser + ?Sized>(
    model: &M,
    x: &[f64],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    key: &StreamKey,
) -> Result<Vec<f64>> {
    spec.validate(sched)?;
    crate::error::check_len(model.data_dim(), x.len(), "data vector")?;
    let timesteps = spec.timestep_plan.timesteps(sched.num_timesteps())?;
    let mut grad = vec![0.0; model.num_params()];
    let scale = 1.0 / (timesteps.len() * spec.noises_per_timestep) as f64;
    for &t in &timesteps {
        accumulate_grad_at_timestep(
            model,
            x,
            spec.kind,
            t,
            spec.noises_per_timestep,
            sched,
            key,
            scale,
            &mut grad,
        );
    }
    Ok(grad)
}

/// Adds `scale * sum_draws grad(integrand)` at timestep `t` into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_grad_at_timestep<M: DifferentiableDenoiser + ?Sized>(
    model: &M,
    x: &[f64],
    kind: LossKind,
    t: usize,
    noises: usize,
    sched: &VarianceSchedule,
    key: &StreamKey,
    scale: f64,
    grad: &mut [f64],
) {
    let alpha_bar = sched.alpha_bar(t);
    let w = if kind == LossKind::Elbo {
        sched.elbo_weight(t)
    } else {
        1.0
    };
    for draw in 0..noises {
        let eps = noise_draw(key, t, draw, x.len());
        let x_t = diffuse_with(x, &eps, alpha_bar);
        model.predict_and_pullback(
            &x_t,
            t,
            &mut |pred| point_cotangent(kind, pred, &eps, w),
            scale,
            grad,
        );
    }
}

/// Gradient of the single-draw simple loss `||eps - eps_theta(x_t, t)||^2`
/// for an explicit `(t, eps)`; returns the loss value. Used by training.
pub fn simple_loss_grad<M: DifferentiableDenoiser + ?Sized>(
    model: &M,
    x: &[f64],
    t: usize,
    eps: &[f64],
    sched: &VarianceSchedule,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let x_t = diffuse_with(x, eps, sched.alpha_bar(t));
    let pred = model.predict_and_pullback(
        &x_t,
        t,
        &mut |pred| point_cotangent(LossKind::Simple, pred, eps, 1.0),
        scale,
        grad,
    );
    point_loss(LossKind::Simple, &pred, eps, 1.0)
}


#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::model::{init_params, DenoiserArch};
    use crate::rng::Purpose;
    use crate::schedule::build_linear_schedule;

    fn spec(kind: LossKind) -> LossSpec {
        LossSpec::new(kind, TimestepPlan::uniform(10), 2)
    }

    #[test]
    fn exact_prediction_zeroes_simple_and_elbo() {
        let sched = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let stub = ExactNoise {
            x: x.clone(),
            sched: sched.clone(),
        };
        let key = StreamKey::new(1, Purpose::FeatureNoise);
        for kind in [LossKind::Simple, LossKind::Elbo] {
            let l = eval_loss(&stub, &x, &spec(kind), &sched, &key).unwrap();
            assert!(l.abs() < 1e-18, "{kind}: {l}");
        }
    }

    #[test]
    fn zero_output_zeroes_output_norms() {
        let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let stub = Constant(vec![0.0, 0.0]);
        let key = StreamKey::new(1, Purpose::FeatureNoise);
        for kind in [
            LossKind::Square,
            LossKind::Avg,
            LossKind::PNorm(PNorm::L1),
            LossKind::PNorm(PNorm::L2),
            LossKind::PNorm(PNorm::Inf),
        ] {
            assert_eq!(eval_loss(&stub, &[1.0, 1.0], &spec(kind), &sched, &key).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_output_norms_by_hand() {
        let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let stub = Constant(vec![2.0, -1.0]);
        let key = StreamKey::new(1, Purpose::FeatureNoise);
        let x = [0.0, 0.0];
        let ev = |k| eval_loss(&stub, &x, &spec(k), &sched, &key).unwrap();
        assert_eq!(ev(LossKind::Square), 5.0);
        assert_eq!(ev(LossKind::PNorm(PNorm::L1)), 3.0);
        assert_eq!(ev(LossKind::PNorm(PNorm::Inf)), 2.0);
        assert_eq!(ev(LossKind::Avg), 0.5);
        assert!((ev(LossKind::PNorm(PNorm::L2)) - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn interpolated_grad_target_cases() {
        let pred = [0.3, -0.7];
        let eps = [1.0, 2.0];
        assert_eq!(interpolated_grad_target(1.0, &pred, &eps), vec![0.6, -1.4]);
        let half = interpolated_grad_target(0.5, &pred, &eps);
        let simple = point_cotangent(LossKind::Simple, &pred, &eps, 1.0);
        for (h, s) in half.iter().zip(&simple) {
            assert!((h - 0.5 * s).abs() < 1e-15);
        }
        assert_eq!(interpolated_grad_target(0.0, &pred, &eps), vec![-2.0, -4.0]);
    }

    #[test]
    fn interpolated_loss_decomposes() {
        let sched = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::new(3, 4, vec![16]);
        let model = init_params(&arch, 2).unwrap();
        let x = [0.1, 0.9, -0.4];
        let key = StreamKey::new(4, Purpose::FeatureNoise).sample(7);
        let ev = |k| eval_loss(&model, &x, &spec(k), &sched, &key).unwrap();
        let (simple, square) = (ev(LossKind::Simple), ev(LossKind::Square));
        for eta in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let lhs = ev(LossKind::Interpolated(eta));
            let rhs = eta * square + (1.0 - eta) * (simple - square);
            assert!((lhs - rhs).abs() < 1e-12, "eta {eta}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let stub = Constant(vec![2.0, -1.0]);
        let key = StreamKey::new(1, Purpose::FeatureNoise);
        let g = per_sample_grad(&stub, &[0.0, 1.0], &spec(LossKind::Square), &sched, &key).unwrap();
        assert_eq!(g, vec![0.0; 5]);
    }

    #[test]
    fn loss_kind_text_round_trip() {
        for kind in [
            LossKind::Simple,
            LossKind::Elbo,
            LossKind::Square,
            LossKind::Avg,
            LossKind::PNorm(PNorm::L1),
            LossKind::PNorm(PNorm::L2),
            LossKind::PNorm(PNorm::Inf),
            LossKind::Interpolated(0.75),
        ] {
            assert_eq!(kind.to_string().parse::<LossKind>().unwrap(), kind);
        }
        assert!("eta=1.5".parse::<LossKind>().is_err());
        assert!("cube".parse::<LossKind>().is_err());
    }

    #[test]
    fn zero_noises_rejected() {
        let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let bad = LossSpec::new(LossKind::Simple, TimestepPlan::uniform(10), 0);
        assert!(bad.validate(&sched).is_err());
    }
}
