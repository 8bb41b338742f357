//! AdamW training of the denoiser on full datasets and on random subsets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{check_len, Error, Result};
use crate::loss::simple_loss_grad;
use crate::model::{init_params, DenoiserArch, ModelParams};
use crate::rng::{derive_seed, Purpose, StreamKey};
use crate::schedule::VarianceSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr_init: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::param("warmup_fraction must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.lr_init <= 0.0 {
            return Err(Error::param("need lr_init > 0 and weight_decay >= 0"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a sample set, independent of storage order.
pub fn dataset_digest(samples: &[Sample]) -> String {
    let mut sorted: Vec<&Sample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.id);
    let mut h = Sha256::new();
    for s in sorted {
        h.update(s.id.to_le_bytes());
        for v in &s.x {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub train_config_hash: String,
    pub dataset_hash: String,
    pub subset_mask: Option<Vec<bool>>,
}

/// Linear warmup over the first `warmup_fraction` of steps, then cosine
/// decay to zero at `total_steps`.
pub fn learning_rate(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_fraction * total_steps as f64).floor() as usize;
    if step < warmup {
        return cfg.lr_init * step as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    fn new(d: usize) -> Self {
        Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            step: 0,
        }
    }

    fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * theta[i]);
        }
    }
}

/// Checkpoints plus the mean single-draw training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub epoch_losses: Vec<f64>,
}

/// Minimises the simple loss with AdamW. Checkpoints are emitted after each
/// requested epoch (1-based) and always after the last one.
pub fn train(
    samples: &[Sample],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
    checkpoint_epochs: &[usize],
) -> Result<Vec<Checkpoint>> {
    train_with_history(samples, arch, sched, cfg, checkpoint_epochs, None).map(|r| r.checkpoints)
}

pub fn train_with_history(
    samples: &[Sample],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
    checkpoint_epochs: &[usize],
    subset_mask: Option<Vec<bool>>,
) -> Result<TrainRun> {
    if samples.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    cfg.validate()?;
    arch.validate()?;
    if let Some(&bad) = checkpoint_epochs.iter().find(|&&e| e == 0 || e > cfg.epochs) {
        return Err(Error::param(format!(
            "checkpoint epoch {bad} outside 1..={}",
            cfg.epochs
        )));
    }
    if samples.iter().any(|s| s.x.len() != arch.input_dim) {
        return Err(Error::Shape {
            expected: arch.input_dim,
            got: samples.iter().find(|s| s.x.len() != arch.input_dim).unwrap().x.len(),
            context: "training sample",
        });
    }

    // Storage order must not matter: work on the samples sorted by id.
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.id);

    let n = ordered.len();
    let t_max = sched.num_timesteps() as u64;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let config_hash = cfg.digest();
    let data_hash = dataset_digest(samples);

    let mut params = init_params(arch, cfg.seed)?;
    let d = params.num_params();
    let mut opt = AdamW::new(d);
    let mut grad = vec![0.0; d];
    let mut step = 0;
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        StreamKey::new(cfg.seed, Purpose::Batching)
            .timestep(epoch as u64)
            .stream()
            .shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let sample = ordered[i];
                let mut s = StreamKey::new(cfg.seed, Purpose::TrainNoise)
                    .sample(sample.id)
                    .timestep(epoch as u64)
                    .stream();
                let t = 1 + s.next_below(t_max) as usize;
                let eps = s.gaussian_vec(arch.input_dim);
                epoch_loss += simple_loss_grad(&params, &sample.x, t, &eps, sched, scale, &mut grad);
            }
            let lr = learning_rate(step, total_steps, cfg);
            opt.update(&mut params.theta, &grad, lr, cfg);
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
        if epoch == cfg.epochs || checkpoint_epochs.contains(&epoch) {
            checkpoints.push(Checkpoint {
                params: params.clone(),
                epoch,
                train_config_hash: config_hash.clone(),
                dataset_hash: data_hash.clone(),
                subset_mask: subset_mask.clone(),
            });
        }
    }
    Ok(TrainRun {
        checkpoints,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub count: usize,
    pub seeds_per_subset: usize,
    pub rng_seed: u64,
}

impl Default for SubsetSpec {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            count: 32,
            seeds_per_subset: 3,
            rng_seed: 0,
        }
    }
}

impl SubsetSpec {
    pub fn subset_size(&self, n: usize) -> usize {
        (self.fraction * n as f64).floor() as usize
    }

    /// `count` membership masks over `n` samples, each with exactly
    /// `floor(fraction * n)` members drawn without replacement.
    pub fn masks(&self, n: usize) -> Result<Vec<Vec<bool>>> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::param("subset fraction must lie in (0, 1]"));
        }
        if self.count == 0 || self.seeds_per_subset == 0 {
            return Err(Error::param("subset count and seeds must be positive"));
        }
        let size = self.subset_size(n);
        if size == 0 {
            return Err(Error::param(format!(
                "fraction {} of {n} samples leaves empty subsets",
                self.fraction
            )));
        }
        Ok((0..self.count)
            .map(|m| {
                let members = StreamKey::new(self.rng_seed, Purpose::Subsets)
                    .model(m as u64)
                    .stream()
                    .choose_without_replacement(n, size);
                let mut mask = vec![false; n];
                members.into_iter().for_each(|i| mask[i] = true);
                mask
            })
            .collect())
    }

    /// Training seed for replicate `s`; shared by every subset so that subsets
    /// differ only in membership.
    pub fn replicate_seed(base: u64, s: usize) -> u64 {
        derive_seed(base, s as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetModelBank {
    pub masks: Vec<Vec<bool>>,
    /// `models[m][s]`: final checkpoint of replicate `s` on subset `m`.
    pub models: Vec<Vec<Checkpoint>>,
}

pub fn train_subsets(
    samples: &[Sample],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
    spec: &SubsetSpec,
) -> Result<SubsetModelBank> {
    let masks = spec.masks(samples.len())?;
    train_on_masks(samples, arch, sched, cfg, masks, spec.seeds_per_subset)
}

/// Trains `seeds` replicates on every masked subset of `samples`; replicate
/// `s` uses [`SubsetSpec::replicate_seed`] regardless of the mask.
pub fn train_on_masks(
    samples: &[Sample],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
    masks: Vec<Vec<bool>>,
    seeds: usize,
) -> Result<SubsetModelBank> {
    if seeds == 0 {
        return Err(Error::param("need at least one seed per subset"));
    }
    for m in &masks {
        check_len(samples.len(), m.len(), "subset mask")?;
    }
    let jobs: Vec<(usize, usize)> = (0..masks.len())
        .flat_map(|m| (0..seeds).map(move |s| (m, s)))
        .collect();
    let trained: Vec<Checkpoint> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let subset: Vec<Sample> = samples
                .iter()
                .zip(&masks[m])
                .filter(|(_, &keep)| keep)
                .map(|(x, _)| x.clone())
                .collect();
            let run_cfg = cfg.with_seed(SubsetSpec::replicate_seed(cfg.seed, s));
            let run = train_with_history(&subset, arch, sched, &run_cfg, &[], Some(masks[m].clone()))?;
            Ok(run.checkpoints.into_iter().last().expect("final checkpoint"))
        })
        .collect::<Result<_>>()?;
    let mut it = trained.into_iter();
    let models = (0..masks.len())
        .map(|_| it.by_ref().take(seeds).collect())
        .collect();
    Ok(SubsetModelBank { masks, models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{eval_loss, LossKind, LossSpec};
    use crate::schedule::{build_linear_schedule, TimestepPlan};

    fn toy() -> (Vec<Sample>, DenoiserArch, VarianceSchedule) {
        let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut arch = DenoiserArch::new(2, 4, vec![16]);
        arch.num_timesteps = 100;
        let samples = (0..6)
            .map(|i| Sample {
                id: i,
                x: vec![i as f64 * 0.3 - 0.6, 1.0 - i as f64 * 0.2],
            })
            .collect();
        (samples, arch, sched)
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr_init: 1e-2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_closed_form() {
        let cfg = TrainConfig {
            lr_init: 0.5,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        let total = 1000;
        assert_eq!(learning_rate(0, total, &cfg), 0.0);
        assert_eq!(learning_rate(50, total, &cfg), 0.25);
        assert_eq!(learning_rate(100, total, &cfg), 0.5);
        assert!((learning_rate(550, total, &cfg) - 0.25).abs() < 1e-12);
        assert!(learning_rate(999, total, &cfg) < 1e-5);
        assert!(learning_rate(1000, total, &cfg).abs() < 1e-15);
    }

    #[test]
    fn training_reduces_loss_on_one_sample() {
        let (samples, arch, sched) = toy();
        let one = &samples[..1];
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            lr_init: 1e-2,
            warmup_fraction: 0.1,
            seed: 3,
            ..TrainConfig::default()
        };
        let spec = LossSpec::new(LossKind::Simple, TimestepPlan::uniform(20), 4);
        let key = StreamKey::new(0, Purpose::OutputNoise);
        let init = init_params(&arch, cfg.seed).unwrap();
        let before = eval_loss(&init, &one[0].x, &spec, &sched, &key).unwrap();
        let ck = train(one, &arch, &sched, &cfg, &[]).unwrap();
        assert_eq!(ck.len(), 1);
        assert_eq!(ck[0].epoch, 300);
        let after = eval_loss(&ck[0].params, &one[0].x, &spec, &sched, &key).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (samples, arch, sched) = toy();
        let cfg = fast_cfg();
        let a = train(&samples, &arch, &sched, &cfg, &[5, 10]).unwrap();
        let b = train(&samples, &arch, &sched, &cfg, &[5, 10]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![5, 10, 20]);
        let mut reversed = samples.clone();
        reversed.reverse();
        let c = train(&reversed, &arch, &sched, &cfg, &[5, 10]).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn training_errors() {
        let (samples, arch, sched) = toy();
        assert!(matches!(
            train(&[], &arch, &sched, &fast_cfg(), &[]),
            Err(Error::Empty(_))
        ));
        assert!(train(&samples, &arch, &sched, &fast_cfg(), &[21]).is_err());
        assert!(train(&samples, &arch, &sched, &fast_cfg(), &[0]).is_err());
    }

    #[test]
    fn masks_have_fixed_popcount() {
        let spec = SubsetSpec {
            fraction: 0.5,
            count: 10,
            seeds_per_subset: 1,
            rng_seed: 4,
        };
        let masks = spec.masks(64).unwrap();
        assert!(masks.iter().all(|m| m.iter().filter(|&&b| b).count() == 32));
        assert_eq!(masks, spec.masks(64).unwrap());
        let other = SubsetSpec { rng_seed: 5, ..spec.clone() }.masks(64).unwrap();
        assert_ne!(masks, other);

        let full = SubsetSpec {
            fraction: 1.0,
            count: 1,
            ..spec
        };
        assert_eq!(full.masks(7).unwrap(), vec![vec![true; 7]]);
    }

    #[test]
    fn subset_bank_layout() {
        let (samples, arch, sched) = toy();
        let spec = SubsetSpec {
            fraction: 0.5,
            count: 2,
            seeds_per_subset: 2,
            rng_seed: 1,
        };
        let cfg = TrainConfig {
            epochs: 2,
            ..fast_cfg()
        };
        let bank = train_subsets(&samples, &arch, &sched, &cfg, &spec).unwrap();
        assert_eq!(bank.models.len(), 2);
        for (m, row) in bank.models.iter().enumerate() {
            assert_eq!(row.len(), 2);
            for ck in row {
                assert_eq!(ck.subset_mask.as_ref(), Some(&bank.masks[m]));
            }
            assert_ne!(row[0].params.theta, row[1].params.theta);
        }
    }
}
