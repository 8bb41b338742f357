//! Projected per-sample gradient features and the matrices built from them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{check_len, Error, Result};
use crate::linalg::Matrix;
use crate::loss::{accumulate_grad_at_timestep, per_sample_grad, LossKind, LossSpec};
use crate::model::{DifferentiableDenoiser, ModelParams};
use crate::projection::GradientProjector;
use crate::rng::{Purpose, StreamKey};
use crate::schedule::VarianceSchedule;
use crate::training::sha256_hex;

/// Samples whose raw gradients are held in memory at once while building a
/// feature matrix.
const GRADIENT_CHUNK: usize = 256;

/// Noise key for the feature gradient of one sample.
pub fn feature_key(noise_seed: u64, sample_id: u64) -> StreamKey {
    StreamKey::new(noise_seed, Purpose::FeatureNoise).sample(sample_id)
}

/// The timestep- and noise-averaged raw gradient of one sample.
pub fn averaged_gradient<M: DifferentiableDenoiser + ?Sized>(
    model: &M,
    sample: &Sample,
    spec: &LossSpec,
    sched: &VarianceSchedule,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    per_sample_grad(model, &sample.x, spec, sched, &feature_key(noise_seed, sample.id))
}

/// `P^T g` where `g` is the averaged gradient: gradients are averaged over
/// timesteps and noises first, then projected once.
pub fn compute_feature<M: DifferentiableDenoiser + ?Sized, P: GradientProjector + ?Sized>(
    model: &M,
    sample: &Sample,
    spec: &LossSpec,
    sched: &VarianceSchedule,
    projector: &P,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    check_len(model.num_params(), projector.input_dim(), "projector input dimension")?;
    let g = averaged_gradient(model, sample, spec, sched, noise_seed)?;
    projector.project(&g)
}

/// Projected gradient of the loss at one fixed timestep, treating `x` itself
/// as the data point. Used for attributing intermediate sampler states.
#[allow(clippy::too_many_arguments)]
pub fn single_timestep_feature<M: DifferentiableDenoiser + ?Sized, P: GradientProjector + ?Sized>(
    model: &M,
    x: &[f64],
    t: usize,
    kind: LossKind,
    noises: usize,
    sched: &VarianceSchedule,
    key: &StreamKey,
    projector: &P,
) -> Result<Vec<f64>> {
    check_len(model.num_params(), projector.input_dim(), "projector input dimension")?;
    let g = single_timestep_gradient(model, x, t, kind, noises, sched, key)?;
    projector.project(&g)
}

/// Raw gradient behind [`single_timestep_feature`].
pub fn single_timestep_gradient<M: DifferentiableDenoiser + ?Sized>(
    model: &M,
    x: &[f64],
    t: usize,
    kind: LossKind,
    noises: usize,
    sched: &VarianceSchedule,
    key: &StreamKey,
) -> Result<Vec<f64>> {
    check_len(model.data_dim(), x.len(), "data vector")?;
    if t == 0 || t > sched.num_timesteps() {
        return Err(Error::param(format!("timestep {t} out of range")));
    }
    if noises == 0 {
        return Err(Error::param("need at least one noise draw"));
    }
    let mut g = vec![0.0; model.num_params()];
    accumulate_grad_at_timestep(model, x, kind, t, noises, sched, key, 1.0 / noises as f64, &mut g);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub model_digest: String,
    pub loss: LossSpec,
    pub noise_seed: u64,
    /// `None` when features are raw (identity-projected) gradients.
    pub projector_seed: Option<u64>,
    pub k: usize,
    pub sample_ids: Vec<u64>,
    pub sample_set: String,
    /// Digest of the experiment config that produced this artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFeatureMatrix {
    pub phi: Matrix,
    pub meta: FeatureMeta,
}

impl GradientFeatureMatrix {
    pub fn n(&self) -> usize {
        self.phi.rows
    }

    pub fn k(&self) -> usize {
        self.phi.cols
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.phi.row(n)
    }
}

pub fn sample_set_digest(ids: &[u64]) -> String {
    let bytes: Vec<u8> = ids.iter().flat_map(|i| i.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Feature rows for `samples` in the given order, computed in parallel.
pub fn feature_rows<M: DifferentiableDenoiser + ?Sized, P: GradientProjector + ?Sized>(
    model: &M,
    samples: &[Sample],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    projector: &P,
    noise_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_len(model.num_params(), projector.input_dim(), "projector input dimension")?;
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(GRADIENT_CHUNK) {
        let grads = chunk
            .par_iter()
            .map(|s| averaged_gradient(model, s, spec, sched, noise_seed))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(projector.project_all(&grads)?);
    }
    Ok(rows)
}

/// `Phi` with row `n` the feature of `samples[n]`.
pub fn build_feature_matrix<P: GradientProjector + ?Sized>(
    model: &ModelParams,
    samples: &[Sample],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    projector: &P,
    projector_seed: Option<u64>,
    noise_seed: u64,
) -> Result<GradientFeatureMatrix> {
    if samples.is_empty() {
        return Err(Error::Empty("feature sample list"));
    }
    let rows = feature_rows(model, samples, spec, sched, projector, noise_seed)?;
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    Ok(GradientFeatureMatrix {
        phi: Matrix::from_rows(&rows)?,
        meta: FeatureMeta {
            model_digest: model.digest(),
            loss: *spec,
            noise_seed,
            projector_seed,
            k: projector.output_dim(),
            sample_set: sample_set_digest(&ids),
            sample_ids: ids,
            config_digest: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::stubs::Constant;
    use crate::model::{init_params, DenoiserArch};
    use crate::projection::{IdentityProjector, Projector};
    use crate::schedule::{build_linear_schedule, TimestepPlan};

    fn setup() -> (ModelParams, VarianceSchedule, Vec<Sample>) {
        let mut arch = DenoiserArch::new(3, 4, vec![6]);
        arch.num_timesteps = 50;
        let params = init_params(&arch, 4).unwrap();
        let sched = build_linear_schedule(50, 1e-4, 0.02).unwrap();
        let samples = (0..4)
            .map(|i| Sample {
                id: 10 + i,
                x: vec![i as f64 * 0.5, -1.0, 0.25 * i as f64],
            })
            .collect();
        (params, sched, samples)
    }

    fn spec(kind: LossKind) -> LossSpec {
        LossSpec::new(kind, TimestepPlan::uniform(5), 2)
    }

    #[test]
    fn zero_gradient_gives_zero_feature() {
        let sched = build_linear_schedule(50, 1e-4, 0.02).unwrap();
        let m = Constant(vec![1.0, 2.0]);
        let p = Projector::new(1, 5, 7).unwrap();
        let s = Sample {
            id: 0,
            x: vec![0.3, 0.4],
        };
        let f = compute_feature(&m, &s, &spec(LossKind::Simple), &sched, &p, 0).unwrap();
        assert_eq!(f, vec![0.0; 7]);
    }

    #[test]
    fn identity_projector_returns_averaged_gradient() {
        let (params, sched, samples) = setup();
        let id = IdentityProjector {
            d: params.num_params(),
        };
        let sp = spec(LossKind::Square);
        let f = compute_feature(&params, &samples[1], &sp, &sched, &id, 9).unwrap();
        let g = per_sample_grad(&params, &samples[1].x, &sp, &sched, &feature_key(9, 11)).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn rows_follow_sample_identity() {
        let (params, sched, samples) = setup();
        let p = Projector::new(3, params.num_params(), 16).unwrap();
        let sp = spec(LossKind::Simple);
        let a = build_feature_matrix(&params, &samples, &sp, &sched, &p, Some(3), 1).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        let b = build_feature_matrix(&params, &rev, &sp, &sched, &p, Some(3), 1).unwrap();
        for n in 0..4 {
            assert_eq!(a.row(n), b.row(3 - n));
        }
        let single = compute_feature(&params, &samples[2], &sp, &sched, &p, 1).unwrap();
        assert_eq!(a.row(2), single.as_slice());
        let one = build_feature_matrix(&params, &samples[2..3], &sp, &sched, &p, Some(3), 1).unwrap();
        assert_eq!((one.n(), one.k()), (1, 16));
        assert_eq!(one.row(0), single.as_slice());
    }

    #[test]
    fn half_interpolation_halves_features() {
        let (params, sched, samples) = setup();
        let p = Projector::new(3, params.num_params(), 8).unwrap();
        let simple = compute_feature(&params, &samples[0], &spec(LossKind::Simple), &sched, &p, 2).unwrap();
        let half = compute_feature(
            &params,
            &samples[0],
            &spec(LossKind::Interpolated(0.5)),
            &sched,
            &p,
            2,
        )
        .unwrap();
        for (a, b) in simple.iter().zip(&half) {
            assert!((0.5 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn projector_must_match_parameter_count() {
        let (params, sched, samples) = setup();
        let p = Projector::new(3, params.num_params() + 1, 8).unwrap();
        assert!(matches!(
            compute_feature(&params, &samples[0], &spec(LossKind::Simple), &sched, &p, 0),
            Err(Error::Shape { .. })
        ));
    }
}
