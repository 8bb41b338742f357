//! Linear datamodeling score, bootstrap intervals, counterfactual
//! remove-and-retrain runs and a brute-force leave-one-out oracle.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::Embedder;
use crate::data::Sample;
use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::loss::{eval_loss, LossSpec};
use crate::model::{DenoiserArch, ModelParams};
use crate::rng::{Purpose, StreamKey};
use crate::sampler::ddim_sample;
use crate::schedule::VarianceSchedule;
use crate::training::{train, train_on_masks, SubsetModelBank, TrainConfig};

/// Pearson correlation of average ranks (ties share their mean rank).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "spearman inputs")?;
    if a.len() < 2 {
        return Err(Error::param("spearman needs at least two points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("spearman input is not finite".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        // ranks start..end (0-based) share their mean, 1-based
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Additive prediction: the sum of scores over mask members.
pub fn g_tau(scores: &[f64], mask: &[bool]) -> f64 {
    scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(s, _)| s)
        .sum()
}

/// How benchmark outputs relate to the loss functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Loss,
    /// Stores `-loss`, so that samples which lower the query loss count as
    /// positively influential.
    NegatedLoss,
}

impl Orientation {
    pub fn apply(self, loss: f64) -> f64 {
        match self {
            Orientation::Loss => loss,
            Orientation::NegatedLoss => -loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsBenchmark {
    pub masks: Vec<Vec<bool>>,
    /// `outputs[m][s][q]`: oriented output of replicate `s` on subset `m`
    /// for query `q`.
    pub outputs: Vec<Vec<Vec<f64>>>,
    pub query_ids: Vec<u64>,
    pub output_spec: LossSpec,
    pub orientation: Orientation,
    pub output_seed: u64,
    /// Digest of the experiment config that produced this artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl LdsBenchmark {
    pub fn num_subsets(&self) -> usize {
        self.masks.len()
    }

    pub fn num_train(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn num_seeds(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.masks.is_empty() {
            return Err(Error::Validation("benchmark has no subsets".into()));
        }
        let n = self.num_train();
        let pop = self.masks[0].iter().filter(|&&b| b).count();
        for m in &self.masks {
            if m.len() != n || m.iter().filter(|&&b| b).count() != pop {
                return Err(Error::Validation(
                    "benchmark masks differ in length or popcount".into(),
                ));
            }
        }
        if self.outputs.len() != self.masks.len() {
            return Err(Error::Validation("one output block per subset required".into()));
        }
        let seeds = self.num_seeds();
        if seeds == 0 {
            return Err(Error::Validation("benchmark needs at least one seed".into()));
        }
        for per_seed in &self.outputs {
            if per_seed.len() != seeds
                || per_seed.iter().any(|q| q.len() != self.query_ids.len())
                || per_seed.iter().flatten().any(|v| !v.is_finite())
            {
                return Err(Error::Validation("benchmark outputs are ragged or not finite".into()));
            }
        }
        Ok(())
    }

    /// The benchmark restricted to the queries at `idx`.
    pub fn select_queries(&self, idx: &[usize]) -> Result<LdsBenchmark> {
        if let Some(&bad) = idx.iter().find(|&&q| q >= self.num_queries()) {
            return Err(Error::param(format!("query index {bad} out of range")));
        }
        Ok(LdsBenchmark {
            outputs: self
                .outputs
                .iter()
                .map(|seeds| seeds.iter().map(|f| idx.iter().map(|&q| f[q]).collect()).collect())
                .collect(),
            query_ids: idx.iter().map(|&q| self.query_ids[q]).collect(),
            ..self.clone()
        })
    }

    /// Seed-averaged output of subset `m` for query `q`.
    pub fn mean_output(&self, m: usize, q: usize) -> f64 {
        let per_seed = &self.outputs[m];
        per_seed.iter().map(|s| s[q]).sum::<f64>() / per_seed.len() as f64
    }
}

/// Key for the output evaluation noise of one query; shared by every model so
/// that subset models are compared under identical draws.
pub fn output_key(output_seed: u64, query_id: u64) -> StreamKey {
    StreamKey::new(output_seed, Purpose::OutputNoise).sample(query_id)
}

/// The raw loss functional of `model` at `x`.
pub fn model_output_f(
    params: &ModelParams,
    x: &[f64],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    key: &StreamKey,
) -> Result<f64> {
    eval_loss(params, x, spec, sched, key)
}

/// Evaluates every bank model on every query.
pub fn build_benchmark(
    bank: &SubsetModelBank,
    queries: &[Sample],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    output_seed: u64,
    orientation: Orientation,
) -> Result<LdsBenchmark> {
    let bench = LdsBenchmark {
        masks: bank.masks.clone(),
        outputs: bank_outputs(bank, queries, spec, sched, output_seed, orientation)?,
        query_ids: queries.iter().map(|q| q.id).collect(),
        output_spec: *spec,
        orientation,
        output_seed,
        config_digest: None,
    };
    bench.validate()?;
    Ok(bench)
}

/// `out[m][s][q]`: oriented output of every bank model on every query.
fn bank_outputs(
    bank: &SubsetModelBank,
    queries: &[Sample],
    spec: &LossSpec,
    sched: &VarianceSchedule,
    output_seed: u64,
    orientation: Orientation,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if queries.is_empty() {
        return Err(Error::Empty("benchmark queries"));
    }
    bank
        .models
        .par_iter()
        .map(|replicates| {
            replicates
                .iter()
                .map(|ck| {
                    queries
                        .iter()
                        .map(|q| {
                            model_output_f(&ck.params, &q.x, spec, sched, &output_key(output_seed, q.id))
                                .map(|v| orientation.apply(v))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsResult {
    /// `None` where the correlation is undefined (constant outputs or
    /// predictions); such queries are excluded from the mean.
    pub per_query: Vec<Option<f64>>,
    pub mean: f64,
    pub excluded: usize,
}

fn lds_on(bench: &LdsBenchmark, scores: &Matrix, subsets: &[usize]) -> Result<LdsResult> {
    bench.validate()?;
    check_len(bench.num_queries(), scores.rows, "score rows (queries)")?;
    check_len(bench.num_train(), scores.cols, "score columns (training samples)")?;
    let per_query: Vec<Option<f64>> = (0..bench.num_queries())
        .map(|q| {
            let truth: Vec<f64> = subsets.iter().map(|&m| bench.mean_output(m, q)).collect();
            let pred: Vec<f64> = subsets
                .iter()
                .map(|&m| g_tau(scores.row(q), &bench.masks[m]))
                .collect();
            match spearman(&truth, &pred) {
                Ok(r) => Ok(Some(r)),
                Err(Error::ConstantInput) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = per_query.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Validation(
            "correlation is undefined for every query".into(),
        ));
    }
    Ok(LdsResult {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        excluded: per_query.len() - defined.len(),
        per_query,
    })
}

/// Per-query Spearman correlation between seed-averaged subset outputs and
/// the additive predictions `g_tau`, plus the mean over defined queries.
pub fn lds(bench: &LdsBenchmark, scores: &Matrix) -> Result<LdsResult> {
    let all: Vec<usize> = (0..bench.num_subsets()).collect();
    lds_on(bench, scores, &all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub mean: f64,
    /// Sample standard deviation over resamples (0 for a single resample).
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    /// Resamples skipped because no query had a defined correlation.
    pub degenerate: usize,
}

/// Subset indices of resample `r`, drawn with replacement.
pub fn bootstrap_indices(seed: u64, r: usize, m: usize) -> Vec<usize> {
    let mut s = StreamKey::new(seed, Purpose::Bootstrap).draw(r as u64).stream();
    (0..m).map(|_| s.next_below(m as u64) as usize).collect()
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resamples subsets with replacement and recomputes the mean LDS; reports
/// the mean, standard deviation and percentile 95% interval.
pub fn bootstrap_lds(
    bench: &LdsBenchmark,
    scores: &Matrix,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if resamples == 0 {
        return Err(Error::param("need at least one bootstrap resample"));
    }
    let m = bench.num_subsets();
    let outcomes = (0..resamples)
        .into_par_iter()
        .map(|r| match lds_on(bench, scores, &bootstrap_indices(seed, r, m)) {
            Ok(res) => Ok(Some(res.mean)),
            Err(Error::Validation(_)) if bench.validate().is_ok() => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values: Vec<f64> = outcomes.iter().flatten().copied().collect();
    if values.is_empty() {
        return Err(Error::Validation("every bootstrap resample is degenerate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    values.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        mean,
        std,
        ci_low: quantile(&values, 0.025),
        ci_high: quantile(&values, 0.975),
        resamples,
        degenerate: resamples - values.len(),
    })
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// One generation to attribute: the sampler seed and the attribution scores
/// of the generated sample over the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTarget {
    pub gen_seed: u64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRow {
    pub method: String,
    pub gen_seeds: Vec<u64>,
    /// Training-set positions removed for each target.
    pub removed: Vec<Vec<usize>>,
    pub l2: Vec<f64>,
    pub cosine: Vec<f64>,
    pub median_l2: f64,
    pub median_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub k: usize,
    pub rows: Vec<CounterfactualRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualConfig {
    pub k: usize,
    pub ddim_steps: usize,
    /// Seed for the uniform-removal control.
    pub random_seed: u64,
}

fn retrain_without(
    samples: &[Sample],
    removed: &[usize],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    let kept: Vec<Sample> = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .map(|(_, s)| s.clone())
        .collect();
    let mut ck = train(&kept, arch, sched, cfg, &[])?;
    Ok(ck.pop().expect("final checkpoint").params)
}

fn run_removals<E: Embedder + ?Sized>(
    method: &str,
    samples: &[Sample],
    removals: Vec<Vec<usize>>,
    targets: &[CounterfactualTarget],
    original: &ModelParams,
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    retrain_cfg: &TrainConfig,
    steps: usize,
    embedder: &E,
) -> Result<CounterfactualRow> {
    let mut unique: Vec<Vec<usize>> = removals.clone();
    unique.sort();
    unique.dedup();
    let models: HashMap<Vec<usize>, ModelParams> = unique
        .into_par_iter()
        .map(|r| retrain_without(samples, &r, arch, sched, retrain_cfg).map(|m| (r, m)))
        .collect::<Result<_>>()?;
    let mut l2 = Vec::with_capacity(targets.len());
    let mut cosine = Vec::with_capacity(targets.len());
    for (t, r) in targets.iter().zip(&removals) {
        let before = ddim_sample(original, sched, steps, t.gen_seed)?;
        let after = ddim_sample(&models[r], sched, steps, t.gen_seed)?;
        let diff: Vec<f64> = before.iter().zip(&after).map(|(a, b)| a - b).collect();
        l2.push(norm2(&diff));
        cosine.push(cosine_similarity(&embedder.embed(&before), &embedder.embed(&after)));
    }
    Ok(CounterfactualRow {
        method: method.to_string(),
        gen_seeds: targets.iter().map(|t| t.gen_seed).collect(),
        removed: removals,
        median_l2: median(&l2),
        median_cosine: median(&cosine),
        l2,
        cosine,
    })
}

/// For each target, removes the `k` highest-scoring training samples,
/// retrains, and compares generations from the same seed before and after.
/// A `random` row removes `k` uniformly chosen samples per target and uses
/// the same retraining config and generation seeds.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_run<E: Embedder + ?Sized>(
    method: &str,
    samples: &[Sample],
    targets: &[CounterfactualTarget],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    retrain_cfg: &TrainConfig,
    cfg: &CounterfactualConfig,
    embedder: &E,
) -> Result<CounterfactualReport> {
    let n = samples.len();
    if cfg.k >= n {
        return Err(Error::param(format!("removal size {} must be below {n}", cfg.k)));
    }
    if targets.is_empty() {
        return Err(Error::Empty("counterfactual targets"));
    }
    for t in targets {
        check_len(n, t.scores.len(), "counterfactual score row")?;
    }
    let mut original = train(samples, arch, sched, retrain_cfg, &[])?;
    let original = original.pop().expect("final checkpoint").params;

    let targeted: Vec<Vec<usize>> = targets.iter().map(|t| top_k(&t.scores, cfg.k)).collect();
    let random: Vec<Vec<usize>> = (0..targets.len())
        .map(|i| {
            StreamKey::new(cfg.random_seed, Purpose::RandomRemoval)
                .sample(i as u64)
                .stream()
                .choose_without_replacement(n, cfg.k)
        })
        .collect();
    let rows = vec![
        run_removals(method, samples, targeted, targets, &original, arch, sched, retrain_cfg, cfg.ddim_steps, embedder)?,
        run_removals("random", samples, random, targets, &original, arch, sched, retrain_cfg, cfg.ddim_steps, embedder)?,
    ];
    Ok(CounterfactualReport { k: cfg.k, rows })
}

/// The mask family used by the oracle: the full set first, then the set
/// without sample `n` for every `n`.
pub fn leave_one_out_masks(n: usize) -> Vec<Vec<bool>> {
    std::iter::once(vec![true; n])
        .chain((0..n).map(|i| (0..n).map(|j| j != i).collect()))
        .collect()
}

/// `out[n][q] = F(q; theta_{-n}) - F(q; theta_full)` with the raw loss as
/// `F`, every model trained from the same seed.
#[allow(clippy::too_many_arguments)]
pub fn loo_oracle(
    samples: &[Sample],
    arch: &DenoiserArch,
    sched: &VarianceSchedule,
    cfg: &TrainConfig,
    output_spec: &LossSpec,
    queries: &[Sample],
    output_seed: u64,
) -> Result<Matrix> {
    if samples.len() < 2 {
        return Err(Error::param("leave-one-out needs at least two samples"));
    }
    let bank = train_on_masks(samples, arch, sched, cfg, leave_one_out_masks(samples.len()), 1)?;
    let outputs = bank_outputs(&bank, queries, output_spec, sched, output_seed, Orientation::Loss)?;
    let full = &outputs[0][0];
    let rows: Vec<Vec<f64>> = outputs[1..]
        .iter()
        .map(|o| o[0].iter().zip(full).map(|(a, b)| a - b).collect())
        .collect();
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::stubs::{Constant, ExactNoise};
    use crate::loss::LossKind;
    use crate::schedule::{build_linear_schedule, TimestepPlan};

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ConstantInput)));
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn g_tau_cases() {
        assert_eq!(g_tau(&[1.0, 2.0, 3.0], &[true, false, true]), 4.0);
        assert_eq!(g_tau(&[1.0, 2.0, 3.0], &[true; 3]), 6.0);
        assert_eq!(g_tau(&[1.0, 2.0, 3.0], &[false; 3]), 0.0);
    }

    fn additive(w: &[f64], masks: Vec<Vec<bool>>) -> LdsBenchmark {
        let outputs = masks.iter().map(|m| vec![vec![g_tau(w, m)]]).collect();
        LdsBenchmark {
            masks,
            outputs,
            query_ids: vec![0],
            output_spec: LossSpec::new(LossKind::Simple, TimestepPlan::uniform(1), 1),
            orientation: Orientation::NegatedLoss,
            output_seed: 0,
            config_digest: None,
        }
    }

    fn four_masks() -> Vec<Vec<bool>> {
        vec![
            vec![true, true, false, false],
            vec![true, false, true, false],
            vec![false, true, false, true],
            vec![false, false, true, true],
        ]
    }

    #[test]
    fn lds_additive_fixture() {
        let w = [1.0, 2.0, 4.0, 8.0];
        let bench = additive(&w, four_masks());
        let pos = Matrix::from_rows(&[w.to_vec()]).unwrap();
        let neg = pos.scale(-1.0);
        assert_eq!(lds(&bench, &pos).unwrap().mean, 1.0);
        assert_eq!(lds(&bench, &neg).unwrap().mean, -1.0);
        // swapping the two largest weights turns g = (3, 5, 10, 12) into
        // (3, 9, 6, 12): ranks (1, 3, 2, 4), so rho = 1 - 6 * 2 / 60
        let swapped = Matrix::from_rows(&[vec![1.0, 2.0, 8.0, 4.0]]).unwrap();
        assert!((lds(&bench, &swapped).unwrap().mean - 0.8).abs() < 1e-15);
    }

    #[test]
    fn lds_excludes_degenerate_queries() {
        let mut bench = additive(&[1.0, 2.0, 4.0, 8.0], four_masks());
        bench.query_ids = vec![0, 1];
        for o in &mut bench.outputs {
            o[0].push(3.0);
        }
        let scores = Matrix::from_rows(&[vec![1.0, 2.0, 4.0, 8.0], vec![1.0, 2.0, 4.0, 8.0]]).unwrap();
        let r = lds(&bench, &scores).unwrap();
        assert_eq!(r.per_query, vec![Some(1.0), None]);
        assert_eq!((r.mean, r.excluded), (1.0, 1));
    }

    #[test]
    fn bootstrap_cases() {
        let w = [1.0, 2.0, 4.0, 8.0];
        let bench = additive(&w, four_masks());
        let pos = Matrix::from_rows(&[w.to_vec()]).unwrap();
        let one = bootstrap_lds(&bench, &pos, 1, 5).unwrap();
        assert_eq!(one.std, 0.0);
        // every resample of an exactly additive benchmark has LDS 1
        let many = bootstrap_lds(&bench, &pos, 200, 5).unwrap();
        assert_eq!((many.mean, many.std), (1.0, 0.0));

        let noisy = Matrix::from_rows(&[vec![1.0, 2.0, 8.0, 4.0]]).unwrap();
        let r = bootstrap_lds(&bench, &noisy, 50, 9).unwrap();
        let mut vals = Vec::new();
        for i in 0..50 {
            let idx = bootstrap_indices(9, i, 4);
            let truth: Vec<f64> = idx.iter().map(|&m| bench.mean_output(m, 0)).collect();
            let pred: Vec<f64> = idx.iter().map(|&m| g_tau(noisy.row(0), &bench.masks[m])).collect();
            if let Ok(v) = spearman(&truth, &pred) {
                vals.push(v);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert_eq!(r.degenerate, 50 - vals.len());
        assert!((r.mean - mean).abs() < 1e-12 && (r.std - std).abs() < 1e-12);
        assert!(r.ci_low <= r.mean && r.mean <= r.ci_high);
    }

    #[test]
    fn output_of_stub_models() {
        let sched = build_linear_schedule(100, 1e-4, 0.02).unwrap();
        let x = vec![0.5, -0.25, 1.0];
        let spec = LossSpec::new(LossKind::Simple, TimestepPlan::uniform(50), 20);
        let exact = ExactNoise {
            x: x.clone(),
            sched: sched.clone(),
        };
        let key = output_key(1, 0);
        assert!(eval_loss(&exact, &x, &spec, &sched, &key).unwrap() < 1e-20);
        let zero = Constant(vec![0.0; 3]);
        let chi = eval_loss(&zero, &x, &spec, &sched, &key).unwrap();
        // mean of ||eps||^2 over 1000 draws of a 3-dimensional Gaussian
        assert!((chi - 3.0).abs() < 0.3, "{chi}");
        assert_eq!(chi, eval_loss(&zero, &x, &spec, &sched, &key).unwrap());
    }

    #[test]
    fn top_k_and_median() {
        assert_eq!(top_k(&[0.1, 5.0, 5.0, -1.0, 3.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.1, 5.0, 3.0], 0), Vec::<usize>::new());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn loo_masks_shape() {
        let m = leave_one_out_masks(3);
        assert_eq!(m.len(), 4);
        assert_eq!(m[0], vec![true; 3]);
        assert_eq!(m[2], vec![true, false, true]);
    }
}
