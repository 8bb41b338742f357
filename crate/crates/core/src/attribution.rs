//! Attribution estimators: kernel-based scores (TRAK and its variants),
//! similarity baselines, and retraining-based estimators.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, norm2, Cholesky, Matrix, RegularizedQr};
use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Cholesky,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub lambda: f64,
    pub solver: Solver,
}

impl KernelConfig {
    pub fn new(lambda: f64, solver: Solver) -> Self {
        Self { lambda, solver }
    }
}

/// `{1, 2, 5} x 10^e` for `e = -2..=6`, ascending.
pub fn lambda_grid() -> Vec<f64> {
    (-2..=6)
        .flat_map(|e| [1.0, 2.0, 5.0].map(|m| format!("{m}e{e}").parse::<f64>().unwrap()))
        .collect()
}

/// Applies `v -> (Phi^T Phi + lambda I)^{-1} v`.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    inner: Factor,
}

#[derive(Debug, Clone)]
enum Factor {
    Cholesky(Cholesky),
    Qr(RegularizedQr),
}

impl Preconditioner {
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.inner {
            Factor::Cholesky(c) => c.solve(v),
            Factor::Qr(q) => q.solve(v),
        }
    }
}

pub fn kernel_precondition(phi: &Matrix, cfg: &KernelConfig) -> Result<Preconditioner> {
    if phi.cols == 0 {
        return Err(Error::param("feature dimension must be positive"));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::param("lambda must be non-negative"));
    }
    let inner = match cfg.solver {
        Solver::Cholesky => {
            let mut g = phi.gram();
            for i in 0..g.rows {
                g.data[i * g.cols + i] += cfg.lambda;
            }
            Factor::Cholesky(Cholesky::factor(&g)?)
        }
        Solver::LeastSquares => Factor::Qr(RegularizedQr::factor(phi, cfg.lambda)?),
    };
    Ok(Preconditioner { inner })
}

/// Scores with an already factored kernel: `Phi (K^{-1} phi_q)`.
pub fn trak_score_with(phi_query: &[f64], phi: &Matrix, pre: &Preconditioner) -> Result<Vec<f64>> {
    check_len(phi.cols, phi_query.len(), "query feature")?;
    phi.mul_vec(&pre.apply(phi_query)?)
}

/// `phi_q^T (Phi^T Phi + lambda I)^{-1} Phi^T` as an `N`-vector.
pub fn trak_score(phi_query: &[f64], phi: &Matrix, cfg: &KernelConfig) -> Result<Vec<f64>> {
    check_len(phi.cols, phi_query.len(), "query feature")?;
    trak_score_with(phi_query, phi, &kernel_precondition(phi, cfg)?)
}

/// One score row per query row, sharing a single factorization.
pub fn trak_scores(queries: &Matrix, phi: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    check_len(phi.cols, queries.cols, "query feature")?;
    let pre = kernel_precondition(phi, cfg)?;
    let rows = (0..queries.rows)
        .into_par_iter()
        .map(|q| trak_score_with(queries.row(q), phi, &pre))
        .collect::<Result<Vec<_>>>()?;
    score_matrix(rows, queries.rows, phi.rows)
}

fn score_matrix(rows: Vec<Vec<f64>>, q: usize, n: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(q, n));
    }
    Matrix::from_rows(&rows)
}

fn mean_rows(parts: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let first = parts.first().ok_or(Error::Empty("ensemble members"))?;
    let n = first.len();
    let mut out = vec![0.0; n];
    for p in &parts {
        check_len(n, p.len(), "ensemble member scores")?;
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let s = parts.len() as f64;
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

/// Mean of per-member TRAK scores; each member is `(phi_query, Phi)` built
/// with its own model and projector.
pub fn ensemble_score(members: &[(Vec<f64>, Matrix)], cfg: &KernelConfig) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    let parts = members
        .iter()
        .map(|(q, phi)| trak_score(q, phi, cfg))
        .collect::<Result<Vec<_>>>()?;
    mean_rows(parts)
}

/// Ensemble version of [`trak_scores`]; each member is `(queries, Phi)`.
pub fn ensemble_scores(members: &[(Matrix, Matrix)], cfg: &KernelConfig) -> Result<Matrix> {
    let (first_q, first_phi) = members.first().ok_or(Error::Empty("ensemble members"))?;
    let mut acc = Matrix::zeros(first_q.rows, first_phi.rows);
    for (q, phi) in members {
        let s = trak_scores(q, phi, cfg)?;
        check_len(acc.data.len(), s.data.len(), "ensemble member scores")?;
        for (a, v) in acc.data.iter_mut().zip(&s.data) {
            *a += v;
        }
    }
    Ok(acc.scale(1.0 / members.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Dot,
    Cosine,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot(a, b) / denom).clamp(-1.0, 1.0)
    }
}

/// Dot product or cosine similarity against every training representation;
/// cosine with a zero vector is 0.
pub fn similarity_score(query: &[f64], train: &Matrix, mode: Similarity) -> Result<Vec<f64>> {
    check_len(train.cols, query.len(), "query representation")?;
    Ok((0..train.rows)
        .map(|n| match mode {
            Similarity::Dot => dot(query, train.row(n)),
            Similarity::Cosine => cosine(query, train.row(n)),
        })
        .collect())
}

pub fn similarity_scores(queries: &Matrix, train: &Matrix, mode: Similarity) -> Result<Matrix> {
    let rows = (0..queries.rows)
        .map(|q| similarity_score(queries.row(q), train, mode))
        .collect::<Result<Vec<_>>>()?;
    score_matrix(rows, queries.rows, train.rows)
}

/// Mean over checkpoints of the per-checkpoint feature similarity. Each
/// checkpoint contributes `(query features, training features)`. With `Dot`
/// this is TracInCP, with `Cosine` it is GAS.
pub fn checkpoint_similarity_scores(
    per_checkpoint: &[(Matrix, Matrix)],
    mode: Similarity,
) -> Result<Matrix> {
    let (q0, t0) = per_checkpoint.first().ok_or(Error::Empty("checkpoint list"))?;
    let mut acc = Matrix::zeros(q0.rows, t0.rows);
    for (q, t) in per_checkpoint {
        let s = similarity_scores(q, t, mode)?;
        check_len(acc.data.len(), s.data.len(), "checkpoint scores")?;
        for (a, v) in acc.data.iter_mut().zip(&s.data) {
            *a += v;
        }
    }
    Ok(acc.scale(1.0 / per_checkpoint.len() as f64))
}

/// Single-query TracInCP; each entry is `(query feature, training features)`.
pub fn tracincp_score(per_checkpoint: &[(Vec<f64>, Matrix)]) -> Result<Vec<f64>> {
    checkpoint_mean(per_checkpoint, Similarity::Dot)
}

/// Single-query GAS: TracInCP with cosine similarity.
pub fn gas_score(per_checkpoint: &[(Vec<f64>, Matrix)]) -> Result<Vec<f64>> {
    checkpoint_mean(per_checkpoint, Similarity::Cosine)
}

fn checkpoint_mean(per_checkpoint: &[(Vec<f64>, Matrix)], mode: Similarity) -> Result<Vec<f64>> {
    if per_checkpoint.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    let parts = per_checkpoint
        .iter()
        .map(|(q, t)| similarity_score(q, t, mode))
        .collect::<Result<Vec<_>>>()?;
    mean_rows(parts)
}

fn divide_or_zero(scores: Vec<f64>, denoms: &[f64]) -> Vec<f64> {
    scores
        .into_iter()
        .zip(denoms)
        .map(|(s, &d)| if d == 0.0 { 0.0 } else { s / d })
        .collect()
}

/// `||K^{-1} phi_n||` for every training row.
pub fn relative_if_denominators(phi: &Matrix, pre: &Preconditioner) -> Result<Vec<f64>> {
    (0..phi.rows)
        .into_par_iter()
        .map(|n| pre.apply(phi.row(n)).map(|v| norm2(&v)))
        .collect()
}

/// TRAK scores divided per training sample by `||K^{-1} phi_n||`.
pub fn relative_if_score(phi_query: &[f64], phi: &Matrix, cfg: &KernelConfig) -> Result<Vec<f64>> {
    let pre = kernel_precondition(phi, cfg)?;
    let raw = trak_score_with(phi_query, phi, &pre)?;
    Ok(divide_or_zero(raw, &relative_if_denominators(phi, &pre)?))
}

/// TRAK scores divided per training sample by `||phi_n||`.
pub fn renorm_if_score(phi_query: &[f64], phi: &Matrix, cfg: &KernelConfig) -> Result<Vec<f64>> {
    let raw = trak_score(phi_query, phi, cfg)?;
    let norms: Vec<f64> = (0..phi.rows).map(|n| norm2(phi.row(n))).collect();
    Ok(divide_or_zero(raw, &norms))
}

pub fn relative_if_scores(queries: &Matrix, phi: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    let pre = kernel_precondition(phi, cfg)?;
    let denoms = relative_if_denominators(phi, &pre)?;
    let rows = (0..queries.rows)
        .map(|q| trak_score_with(queries.row(q), phi, &pre).map(|s| divide_or_zero(s, &denoms)))
        .collect::<Result<Vec<_>>>()?;
    score_matrix(rows, queries.rows, phi.rows)
}

pub fn renorm_if_scores(queries: &Matrix, phi: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    let raw = trak_scores(queries, phi, cfg)?;
    let norms: Vec<f64> = (0..phi.rows).map(|n| norm2(phi.row(n))).collect();
    let rows = raw
        .row_vecs()
        .into_iter()
        .map(|s| divide_or_zero(s, &norms))
        .collect();
    score_matrix(rows, queries.rows, phi.rows)
}

/// Mean TRAK score over the features of each visited sampler state.
pub fn journey_trak_score(step_features: &[Vec<f64>], phi: &Matrix, cfg: &KernelConfig) -> Result<Vec<f64>> {
    if step_features.is_empty() {
        return Err(Error::Empty("sampling trajectory"));
    }
    let pre = kernel_precondition(phi, cfg)?;
    let parts = step_features
        .iter()
        .map(|f| trak_score_with(f, phi, &pre))
        .collect::<Result<Vec<_>>>()?;
    mean_rows(parts)
}

/// Mean output over subsets containing `n` minus the mean over subsets
/// excluding it. `outputs[m]` holds the per-seed outputs of subset `m`,
/// which are averaged first.
pub fn empirical_influence(masks: &[Vec<bool>], outputs: &[Vec<f64>], n: usize) -> Result<f64> {
    check_len(masks.len(), outputs.len(), "outputs per subset")?;
    let (mut inc, mut n_inc, mut exc, mut n_exc) = (0.0, 0usize, 0.0, 0usize);
    for (mask, f) in masks.iter().zip(outputs) {
        if f.is_empty() {
            return Err(Error::Empty("per-seed outputs"));
        }
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        match mask.get(n) {
            Some(true) => {
                inc += mean;
                n_inc += 1;
            }
            Some(false) => {
                exc += mean;
                n_exc += 1;
            }
            None => return Err(Error::param(format!("training index {n} outside mask"))),
        }
    }
    if n_inc == 0 || n_exc == 0 {
        return Err(Error::Coverage {
            index: n,
            missing: if n_inc == 0 { "included" } else { "excluded" },
        });
    }
    Ok(inc / n_inc as f64 - exc / n_exc as f64)
}

/// Empirical influence of every training index.
pub fn empirical_influence_all(masks: &[Vec<bool>], outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = masks.first().ok_or(Error::Empty("subset masks"))?.len();
    (0..n).map(|i| empirical_influence(masks, outputs, i)).collect()
}

/// Ridge regression of subset outputs on membership indicators:
/// `argmin_w ||X w - F||^2 + ridge ||w||^2`.
pub fn datamodel_fit(masks: &[Vec<bool>], outputs: &[f64], ridge: f64) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::Empty("subset masks"));
    }
    check_len(masks.len(), outputs.len(), "outputs per subset")?;
    let rows: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let x = Matrix::from_rows(&rows)?;
    let rhs = x.tr_mul_vec(outputs)?;
    RegularizedQr::factor(&x, ridge)?.solve(&rhs)
}

/// Stable method identifiers used on the command line and in file metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    RawPixel,
    EmbedSim,
    GradDot,
    GradCos,
    TracInCp,
    Gas,
    Trak,
    DTrak,
    RelativeIf,
    RenormIf,
    JourneyTrak,
    EmpiricalIf,
    Datamodel,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::RawPixel,
        Method::EmbedSim,
        Method::GradDot,
        Method::GradCos,
        Method::TracInCp,
        Method::Gas,
        Method::Trak,
        Method::DTrak,
        Method::RelativeIf,
        Method::RenormIf,
        Method::JourneyTrak,
        Method::EmpiricalIf,
        Method::Datamodel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RawPixel => "raw-pixel",
            Method::EmbedSim => "embed-sim",
            Method::GradDot => "grad-dot",
            Method::GradCos => "grad-cos",
            Method::TracInCp => "tracincp",
            Method::Gas => "gas",
            Method::Trak => "trak",
            Method::DTrak => "d-trak",
            Method::RelativeIf => "relative-if",
            Method::RenormIf => "renorm-if",
            Method::JourneyTrak => "journey-trak",
            Method::EmpiricalIf => "empirical-if",
            Method::Datamodel => "datamodel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param(format!("unknown method '{s}'")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub method: Method,
    pub loss: Option<crate::loss::LossSpec>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub model_digests: Vec<String>,
    pub query_ids: Vec<u64>,
    pub train_ids: Vec<u64>,
    /// Digest of the experiment config that produced this artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// `scores[q][n]`: attribution of training sample `n` for query `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScoreMatrix {
    pub scores: Matrix,
    pub meta: ScoreMeta,
}

impl AttributionScoreMatrix {
    pub fn row(&self, q: usize) -> &[f64] {
        self.scores.row(q)
    }
}

/// Score of training sample `n` for the query that is the same sample.
pub fn self_influence(scores: &AttributionScoreMatrix, n: usize) -> Result<f64> {
    let id = *scores
        .meta
        .train_ids
        .get(n)
        .ok_or_else(|| Error::param(format!("training index {n} out of range")))?;
    let q = scores
        .meta
        .query_ids
        .iter()
        .position(|&qid| qid == id)
        .ok_or_else(|| Error::Validation(format!("training sample {id} is not among the queries")))?;
    Ok(scores.scores.get(q, n))
}

/// Maps a data vector to a representation for similarity baselines.
pub trait Embedder: Sync {
    fn embed(&self, x: &[f64]) -> Vec<f64>;
}

/// Seeded Gaussian projection of raw vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomProjectionEmbedder {
    pub seed: u64,
    pub input_dim: usize,
    pub dim: usize,
}

impl RandomProjectionEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64, input_dim: usize) -> Self {
        Self {
            seed,
            input_dim,
            dim: Self::DEFAULT_DIM,
        }
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|j| {
                let mut s = StreamKey::new(self.seed, Purpose::Embedder)
                    .timestep(j as u64)
                    .stream();
                x.iter().take(self.input_dim).map(|v| v * s.next_gaussian()).sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye2() -> Matrix {
        Matrix::identity(2)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grid_endpoints() {
        let g = lambda_grid();
        assert_eq!(g.len(), 27);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[1], 2e-2);
        assert_eq!(g[2], 5e-2);
        assert_eq!(*g.last().unwrap(), 5e6);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn kernel_hand_cases() {
        for solver in [Solver::Cholesky, Solver::LeastSquares] {
            let p0 = kernel_precondition(&eye2(), &KernelConfig::new(0.0, solver)).unwrap();
            assert!(close(&p0.apply(&[3.0, -1.0]).unwrap(), &[3.0, -1.0], 1e-12));
            let p1 = kernel_precondition(&eye2(), &KernelConfig::new(1.0, solver)).unwrap();
            assert!(close(&p1.apply(&[3.0, -1.0]).unwrap(), &[1.5, -0.5], 1e-12));
            let s0 = trak_score(&[1.0, 0.0], &eye2(), &KernelConfig::new(0.0, solver)).unwrap();
            assert!(close(&s0, &[1.0, 0.0], 1e-12));
            let s1 = trak_score(&[1.0, 0.0], &eye2(), &KernelConfig::new(1.0, solver)).unwrap();
            assert!(close(&s1, &[0.5, 0.0], 1e-12));
            let z = trak_score(&[0.0, 0.0], &eye2(), &KernelConfig::new(1.0, solver)).unwrap();
            assert_eq!(z, vec![0.0, 0.0]);
        }
        let rank1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let err = kernel_precondition(&rank1, &KernelConfig::new(0.0, Solver::Cholesky)).unwrap_err();
        assert!(err.to_string().contains("cholesky"), "{err}");
    }

    #[test]
    fn ensemble_cases() {
        let cfg = KernelConfig::new(0.0, Solver::Cholesky);
        let one = ensemble_score(&[(vec![1.0, 0.0], eye2())], &cfg).unwrap();
        assert_eq!(one, trak_score(&[1.0, 0.0], &eye2(), &cfg).unwrap());
        let twice = ensemble_score(&[(vec![1.0, 0.0], eye2()), (vec![1.0, 0.0], eye2())], &cfg).unwrap();
        assert_eq!(twice, one);
        let mixed = ensemble_score(&[(vec![1.0, 0.0], eye2()), (vec![0.0, 1.0], eye2())], &cfg).unwrap();
        assert!(close(&mixed, &[0.5, 0.5], 1e-15));
        assert!(ensemble_score(&[], &cfg).is_err());
    }

    #[test]
    fn similarity_cases() {
        let t = Matrix::from_rows(&[vec![3.0, 4.0], vec![-4.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let dot = similarity_score(&[1.0, 2.0], &t, Similarity::Dot).unwrap();
        assert_eq!(dot[0], 11.0);
        let cos = similarity_score(&[3.0, 4.0], &t, Similarity::Cosine).unwrap();
        assert!((cos[0] - 1.0).abs() < 1e-15);
        assert_eq!(cos[1], 0.0);
        assert_eq!(cos[2], 0.0);
    }

    #[test]
    fn tracincp_and_gas_cases() {
        let train = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let s = tracincp_score(&[(vec![1.0, 0.0], train.clone()), (vec![0.0, 1.0], train.clone())]).unwrap();
        assert_eq!(s, vec![1.0]);
        let single = tracincp_score(&[(vec![2.0, 0.5], train.clone())]).unwrap();
        let repeated = tracincp_score(&[(vec![2.0, 0.5], train.clone()), (vec![2.0, 0.5], train.clone())]).unwrap();
        assert_eq!(single, repeated);
        assert_eq!(single, similarity_score(&[2.0, 0.5], &train, Similarity::Dot).unwrap());
        let g = gas_score(&[(vec![1.0, 1.0], train.clone())]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-15);
        let orth = gas_score(&[(vec![1.0, -1.0], train)]).unwrap();
        assert_eq!(orth, vec![0.0]);
        assert!(tracincp_score(&[]).is_err());
    }

    #[test]
    fn normalized_if_cases() {
        let cfg = KernelConfig::new(0.0, Solver::Cholesky);
        assert!(close(&relative_if_score(&[1.0, 0.0], &eye2(), &cfg).unwrap(), &[1.0, 0.0], 1e-12));
        assert!(close(&renorm_if_score(&[1.0, 0.0], &eye2(), &cfg).unwrap(), &[1.0, 0.0], 1e-12));
        let phi = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.0], vec![-0.3, 2.0]]).unwrap();
        let cfg = KernelConfig::new(0.5, Solver::Cholesky);
        let q = [0.7, -0.2];
        let rel = relative_if_score(&q, &phi, &cfg).unwrap();
        let ren = renorm_if_score(&q, &phi, &cfg).unwrap();
        assert_eq!((rel[1], ren[1]), (0.0, 0.0));
        let mut scaled = phi.clone();
        for v in &mut scaled.data[4..6] {
            *v *= 3.0;
        }
        let rel_s = relative_if_score(&q, &scaled, &cfg).unwrap();
        let ren_s = renorm_if_score(&q, &scaled, &cfg).unwrap();
        assert_eq!(rel_s[2].signum(), rel[2].signum());
        assert_eq!(ren_s[2].signum(), ren[2].signum());
        let many = relative_if_scores(&Matrix::from_rows(&[q.to_vec()]).unwrap(), &phi, &cfg).unwrap();
        assert!(close(many.row(0), &rel, 1e-14));
        let many = renorm_if_scores(&Matrix::from_rows(&[q.to_vec()]).unwrap(), &phi, &cfg).unwrap();
        assert!(close(many.row(0), &ren, 1e-14));
    }

    #[test]
    fn journey_cases() {
        let cfg = KernelConfig::new(1.0, Solver::Cholesky);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 2.0];
        let single = journey_trak_score(&[a.clone()], &eye2(), &cfg).unwrap();
        assert_eq!(single, trak_score(&a, &eye2(), &cfg).unwrap());
        let dup = journey_trak_score(&[a.clone(), a.clone()], &eye2(), &cfg).unwrap();
        assert_eq!(dup, single);
        let two = journey_trak_score(&[a, b], &eye2(), &cfg).unwrap();
        assert!(close(&two, &[0.25, 0.5], 1e-15));
        assert!(journey_trak_score(&[], &eye2(), &cfg).is_err());
    }

    #[test]
    fn empirical_influence_cases() {
        let masks = vec![
            vec![true, false],
            vec![true, true],
            vec![false, true],
            vec![false, false],
        ];
        let f = vec![vec![2.0], vec![4.0], vec![1.0], vec![3.0]];
        assert_eq!(empirical_influence(&masks, &f, 0).unwrap(), 1.0);
        let constant = vec![vec![5.0, 5.0]; 4];
        assert_eq!(empirical_influence(&masks, &constant, 1).unwrap(), 0.0);
        let never = vec![vec![true, false], vec![true, false]];
        assert!(matches!(
            empirical_influence(&never, &[vec![1.0], vec![2.0]], 1),
            Err(Error::Coverage { index: 1, .. })
        ));
        // seeds are averaged before the difference of means
        let seeded = vec![vec![1.0, 3.0], vec![5.0, 7.0], vec![0.0, 2.0], vec![2.0, 4.0]];
        assert_eq!(empirical_influence(&masks, &seeded, 0).unwrap(), 4.0 - 2.0);
    }

    #[test]
    fn datamodel_cases() {
        let n = 5;
        let w_true = [0.5, -1.25, 2.0, 0.0, 3.5];
        let masks: Vec<Vec<bool>> = (0..12)
            .map(|m| (0..n).map(|i| (m * 7 + i * 3) % 5 < 2 || (m + i) % 4 == 0).collect())
            .collect();
        let f: Vec<f64> = masks
            .iter()
            .map(|m| m.iter().zip(&w_true).filter(|(b, _)| **b).map(|(_, w)| w).sum())
            .collect();
        let w = datamodel_fit(&masks, &f, 0.0).unwrap();
        assert!(close(&w, &w_true, 1e-8), "{w:?}");
        let shrunk = datamodel_fit(&masks, &f, 1e12).unwrap();
        assert!(shrunk.iter().all(|v| v.abs() < 1e-9));
        assert!(matches!(
            datamodel_fit(&[vec![true; 3]], &[1.0], 0.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn self_influence_reads_matching_query() {
        let scores = AttributionScoreMatrix {
            scores: Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            meta: ScoreMeta {
                method: Method::Trak,
                loss: None,
                k: None,
                lambda: None,
                model_digests: vec![],
                query_ids: vec![7, 5],
                train_ids: vec![5, 7],
                config_digest: None,
            },
        };
        assert_eq!(self_influence(&scores, 0).unwrap(), 3.0);
        assert_eq!(self_influence(&scores, 1).unwrap(), 2.0);
        assert!(self_influence(&scores, 2).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn embedder_is_linear_and_seeded() {
        let e = RandomProjectionEmbedder::new(3, 4);
        let a = e.embed(&[1.0, 0.0, 2.0, -1.0]);
        assert_eq!(a.len(), 64);
        assert_eq!(a, e.embed(&[1.0, 0.0, 2.0, -1.0]));
        let double = e.embed(&[2.0, 0.0, 4.0, -2.0]);
        assert!(close(&double, &a.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), 1e-12));
    }
}
