//! Experiment stages over an output directory. Each stage reads what earlier
//! stages wrote and persists its own artifacts:
//!
//! ```text
//! config.json                 resolved config and its digest
//! data.json, data.bin         dataset
//! model.dtrk                  final checkpoint
//! model_epoch{e}.dtrk         intermediate checkpoints
//! queries.json                validation and generated queries
//! subsets/                    subset model bank
//! benchmark/                  LDS benchmark
//! features/{loss}-{set}.dtrk  feature matrices (set = train | queries)
//! scores/{name}.dtrk          attribution scores
//! results/*.json              LDS, bootstrap, sweep and counterfactual results
//! loo.dtrk                    leave-one-out differences
//! report.csv, report.json
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    checkpoint_similarity_scores, datamodel_fit, empirical_influence_all, journey_trak_score,
    relative_if_scores, renorm_if_scores, similarity_scores, trak_scores, AttributionScoreMatrix,
    Embedder, KernelConfig, Method, RandomProjectionEmbedder, ScoreMeta, Similarity,
};
use crate::config::ExperimentConfig;
use crate::data::{generate, Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{
    bootstrap_lds, build_benchmark, counterfactual_run, lds, loo_oracle, BootstrapResult,
    CounterfactualConfig, CounterfactualReport, CounterfactualTarget, LdsBenchmark, LdsResult,
};
use crate::features::{build_feature_matrix, feature_key, single_timestep_gradient, GradientFeatureMatrix};
use crate::linalg::Matrix;
use crate::loss::{LossKind, LossSpec};
use crate::model::ModelParams;
use crate::projection::{GradientProjector, Projector};
use crate::report::{self, ReportRow};
use crate::rng::{Purpose, StreamKey};
use crate::sampler::{ddim_sample, ddim_sample_with_trajectory, ddim_timesteps};
use crate::schedule::{forward_diffuse, VarianceSchedule};
use crate::store::{
    load_benchmark, load_checkpoint, load_dataset, load_features, load_json, load_scores,
    save_bank, save_benchmark, save_checkpoint, save_dataset, save_features, save_json, save_scores,
    write_matrix_file, Dtype, Role,
};
use crate::training::{sha256_hex, train, train_subsets, Checkpoint};

/// Ids of generated queries start here, above any dataset index.
pub const GEN_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Validation,
    Generation,
}

impl Split {
    pub fn of_id(id: u64) -> Split {
        if id >= GEN_ID_BASE {
            Split::Generation
        } else {
            Split::Validation
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub split: Split,
    /// Sampler seed of a generated query.
    pub gen_seed: Option<u64>,
    pub x: Vec<f64>,
}

impl Query {
    pub fn sample(&self) -> Sample {
        Sample {
            id: self.id,
            x: self.x.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub lds: LdsResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsSummary {
    pub scores: String,
    pub method: Method,
    pub all: LdsResult,
    pub splits: Vec<(String, LdsResult)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResolvedConfig {
    digest: String,
    config: ExperimentConfig,
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("data.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.dtrk")
    }

    pub fn model_epoch(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("model_epoch{epoch}.dtrk"))
    }

    pub fn queries(&self) -> PathBuf {
        self.root.join("queries.json")
    }

    pub fn subsets(&self) -> PathBuf {
        self.root.join("subsets")
    }

    pub fn benchmark(&self) -> PathBuf {
        self.root.join("benchmark")
    }

    pub fn features(&self, kind: LossKind, set: &str) -> PathBuf {
        self.root.join("features").join(format!("{kind}-{set}.dtrk"))
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn scores(&self, name: &str) -> PathBuf {
        self.scores_dir().join(format!("{name}.dtrk"))
    }

    pub fn result(&self, name: &str) -> PathBuf {
        self.root.join("results").join(format!("{name}.json"))
    }

    pub fn loo(&self) -> PathBuf {
        self.root.join("loo.dtrk")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Digest of a config, ignoring where its outputs go.
pub fn config_digest(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    Ok(sha256_hex(serde_json::to_string(&c)?.as_bytes()))
}

/// Default loss of the features a gradient method uses; `None` for methods
/// that do not use gradients.
pub fn default_loss(method: Method, cfg: &ExperimentConfig) -> Option<LossKind> {
    match method {
        Method::RawPixel | Method::EmbedSim | Method::EmpiricalIf | Method::Datamodel => None,
        Method::DTrak => Some(cfg.methods.dtrak_loss),
        _ => Some(LossKind::Simple),
    }
}

fn uses_kernel(method: Method) -> bool {
    matches!(
        method,
        Method::Trak | Method::DTrak | Method::RelativeIf | Method::RenormIf | Method::JourneyTrak
    )
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    sched: VarianceSchedule,
    digest: String,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sched: cfg.schedule.build()?,
            digest: config_digest(&cfg)?,
            layout: Layout::new(cfg.out_dir.clone()),
            cfg,
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.sched
    }

    fn record_config(&self) -> Result<()> {
        ensure_dir(&self.layout.root)?;
        save_json(
            &self.layout.config(),
            &ResolvedConfig {
                digest: self.digest.clone(),
                config: self.cfg.clone(),
            },
        )
    }

    pub fn gen_data(&self) -> Result<Dataset> {
        self.record_config()?;
        let d = generate(&self.cfg.data, self.cfg.seeds().data)?;
        save_dataset(&self.layout.dataset(), &d)?;
        Ok(d)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = load_dataset(&self.layout.dataset())?;
        if d.dim != self.cfg.data.dim {
            return Err(Error::Validation(format!(
                "dataset dimension {} differs from config dimension {}",
                d.dim, self.cfg.data.dim
            )));
        }
        Ok(d)
    }

    pub fn train_samples(&self) -> Result<Vec<Sample>> {
        Ok(self.dataset()?.train_samples())
    }

    fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self
            .cfg
            .methods
            .checkpoint_epochs
            .iter()
            .copied()
            .filter(|&e| e != self.cfg.train.epochs)
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Trains the full model, saves its checkpoints and builds the query set
    /// (validation samples plus samples generated by the trained model).
    pub fn train(&self) -> Result<Checkpoint> {
        self.record_config()?;
        let d = self.dataset()?;
        let epochs = self.checkpoint_epochs();
        let mut cks = train(
            &d.train_samples(),
            &self.cfg.arch(),
            &self.sched,
            &self.cfg.train_config(),
            &epochs,
        )?;
        let last = cks.pop().expect("final checkpoint");
        for ck in &cks {
            save_checkpoint(&self.layout.model_epoch(ck.epoch), ck)?;
        }
        save_checkpoint(&self.layout.model(), &last)?;

        let mut queries: Vec<Query> = d
            .validation_samples()
            .into_iter()
            .map(|s| Query {
                id: s.id,
                split: Split::Validation,
                gen_seed: None,
                x: s.x,
            })
            .collect();
        for (i, seed) in self.cfg.generation_seeds().into_iter().enumerate() {
            queries.push(Query {
                id: GEN_ID_BASE + i as u64,
                split: Split::Generation,
                gen_seed: Some(seed),
                x: ddim_sample(&last.params, &self.sched, self.cfg.benchmark.ddim_steps, seed)?,
            });
        }
        save_json(&self.layout.queries(), &queries)?;
        Ok(last)
    }

    pub fn model(&self) -> Result<Checkpoint> {
        load_checkpoint(&self.layout.model())
    }

    pub fn queries(&self) -> Result<Vec<Query>> {
        let q: Vec<Query> = load_json(&self.layout.queries())?;
        if q.is_empty() {
            return Err(Error::Empty("query set"));
        }
        Ok(q)
    }

    fn query_samples(&self) -> Result<Vec<Sample>> {
        Ok(self.queries()?.iter().map(Query::sample).collect())
    }

    /// Trains the subset models and evaluates them on every query.
    pub fn train_subsets(&self) -> Result<LdsBenchmark> {
        self.record_config()?;
        let samples = self.train_samples()?;
        let queries = self.query_samples()?;
        let bank = train_subsets(
            &samples,
            &self.cfg.arch(),
            &self.sched,
            &self.cfg.train_config(),
            &self.cfg.subset_spec(),
        )?;
        ensure_dir(&self.layout.subsets())?;
        save_bank(&self.layout.subsets(), &bank)?;
        let mut bench = build_benchmark(
            &bank,
            &queries,
            &self.cfg.benchmark.output_spec(),
            &self.sched,
            self.cfg.seeds().output,
            self.cfg.benchmark.orientation,
        )?;
        bench.config_digest = Some(self.digest.clone());
        ensure_dir(&self.layout.benchmark())?;
        save_benchmark(&self.layout.benchmark(), &bench)?;
        Ok(bench)
    }

    pub fn benchmark(&self) -> Result<LdsBenchmark> {
        load_benchmark(&self.layout.benchmark())
    }

    pub fn loss_spec(&self, kind: LossKind) -> LossSpec {
        self.cfg.features.loss_spec(kind)
    }

    fn projector(&self, params: &ModelParams) -> Result<Projector> {
        Projector::new(self.cfg.seeds().projector, params.num_params(), self.cfg.features.k)
    }

    fn feature_matrix(&self, params: &ModelParams, samples: &[Sample], kind: LossKind) -> Result<GradientFeatureMatrix> {
        let seeds = self.cfg.seeds();
        let mut f = build_feature_matrix(
            params,
            samples,
            &self.loss_spec(kind),
            &self.sched,
            &self.projector(params)?,
            Some(seeds.projector),
            seeds.feature_noise,
        )?;
        f.meta.config_digest = Some(self.digest.clone());
        Ok(f)
    }

    /// Computes and saves training and query features of the final model.
    /// The returned matrices are the stored ones, so they carry the storage
    /// precision.
    pub fn features(&self, kind: LossKind) -> Result<(GradientFeatureMatrix, GradientFeatureMatrix)> {
        self.record_config()?;
        let model = self.model()?;
        let dtype = self.cfg.features.dtype;
        for (set, samples) in [("train", self.train_samples()?), ("queries", self.query_samples()?)] {
            let path = self.layout.features(kind, set);
            ensure_parent(&path)?;
            save_features(&path, &self.feature_matrix(&model.params, &samples, kind)?, dtype)?;
        }
        self.stored_features(kind, &model.params)?
            .ok_or_else(|| Error::Validation("freshly written features do not match the model".into()))
    }

    fn stored_features(
        &self,
        kind: LossKind,
        params: &ModelParams,
    ) -> Result<Option<(GradientFeatureMatrix, GradientFeatureMatrix)>> {
        let (tp, qp) = (self.layout.features(kind, "train"), self.layout.features(kind, "queries"));
        if !tp.exists() || !qp.exists() {
            return Ok(None);
        }
        let (t, q) = (load_features(&tp)?, load_features(&qp)?);
        let digest = params.digest();
        let current = |f: &GradientFeatureMatrix| {
            f.meta.config_digest.as_deref() == Some(self.digest.as_str())
                && f.meta.model_digest == digest
                && f.meta.loss == self.loss_spec(kind)
        };
        Ok((current(&t) && current(&q)).then_some((t, q)))
    }

    fn ensure_features(&self, kind: LossKind, params: &ModelParams) -> Result<(GradientFeatureMatrix, GradientFeatureMatrix)> {
        match self.stored_features(kind, params)? {
            Some(f) => Ok(f),
            None => self.features(kind),
        }
    }

    fn score_name(&self, method: Method, loss: Option<LossKind>, lambda: Option<f64>) -> String {
        let mut name = method.name().to_string();
        if let Some(l) = loss.filter(|l| Some(*l) != default_loss(method, &self.cfg)) {
            name.push_str(&format!("-{l}"));
        }
        if let Some(l) = lambda.filter(|l| *l != self.cfg.kernel.lambda) {
            name.push_str(&format!("-lambda{l}"));
        }
        name
    }

    /// Scores every query against the training set with `method` and saves
    /// them under `scores/`. `loss` and `lambda` override the config.
    pub fn attribute(
        &self,
        method: Method,
        loss: Option<LossKind>,
        lambda: Option<f64>,
    ) -> Result<(PathBuf, AttributionScoreMatrix)> {
        self.record_config()?;
        let mut scores = self.compute_scores(method, loss, lambda.unwrap_or(self.cfg.kernel.lambda))?;
        scores.meta.config_digest = Some(self.digest.clone());
        let path = self.layout.scores(&self.score_name(method, loss, lambda));
        ensure_parent(&path)?;
        save_scores(&path, &scores, Dtype::F64)?;
        Ok((path, scores))
    }

    /// Score matrix of `method` without saving it.
    pub fn compute_scores(&self, method: Method, loss: Option<LossKind>, lambda: f64) -> Result<AttributionScoreMatrix> {
        let kind = match (default_loss(method, &self.cfg), loss) {
            (None, Some(_)) => {
                return Err(Error::param(format!("method {method} takes no --loss")));
            }
            (d, l) => l.or(d),
        };
        let train = self.train_samples()?;
        let queries = self.queries()?;
        let kcfg = KernelConfig::new(lambda, self.cfg.kernel.solver);
        let mut meta = ScoreMeta {
            method,
            loss: kind.map(|k| self.loss_spec(k)),
            k: kind.map(|_| self.cfg.features.k),
            lambda: uses_kernel(method).then_some(lambda),
            model_digests: Vec::new(),
            query_ids: queries.iter().map(|q| q.id).collect(),
            train_ids: train.iter().map(|s| s.id).collect(),
            config_digest: None,
        };
        let matrix = |v: Vec<Vec<f64>>| Matrix::from_rows(&v);
        let raw = |xs: Vec<Vec<f64>>| matrix(xs);
        let scores = match method {
            Method::RawPixel => similarity_scores(
                &raw(queries.iter().map(|q| q.x.clone()).collect())?,
                &raw(train.iter().map(|s| s.x.clone()).collect())?,
                self.cfg.methods.similarity,
            )?,
            Method::EmbedSim => {
                let e = RandomProjectionEmbedder {
                    seed: self.cfg.seeds().embedder,
                    input_dim: self.cfg.data.dim,
                    dim: self.cfg.methods.embed_dim,
                };
                similarity_scores(
                    &raw(queries.iter().map(|q| e.embed(&q.x)).collect())?,
                    &raw(train.iter().map(|s| e.embed(&s.x)).collect())?,
                    self.cfg.methods.similarity,
                )?
            }
            Method::EmpiricalIf | Method::Datamodel => {
                let bench = self.matching_benchmark(&meta)?;
                let rows = (0..bench.num_queries())
                    .map(|q| {
                        if method == Method::EmpiricalIf {
                            let per_subset: Vec<Vec<f64>> = bench
                                .outputs
                                .iter()
                                .map(|seeds| seeds.iter().map(|f| f[q]).collect())
                                .collect();
                            empirical_influence_all(&bench.masks, &per_subset)
                        } else {
                            let means: Vec<f64> =
                                (0..bench.num_subsets()).map(|m| bench.mean_output(m, q)).collect();
                            datamodel_fit(&bench.masks, &means, self.cfg.methods.datamodel_ridge)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                matrix(rows)?
            }
            Method::TracInCp | Method::Gas => {
                let kind = kind.expect("gradient method");
                let mut per_checkpoint = Vec::new();
                let mut models = self
                    .checkpoint_epochs()
                    .into_iter()
                    .map(|e| load_checkpoint(&self.layout.model_epoch(e)))
                    .collect::<Result<Vec<_>>>()?;
                models.push(self.model()?);
                let qs: Vec<Sample> = queries.iter().map(Query::sample).collect();
                for ck in &models {
                    meta.model_digests.push(ck.params.digest());
                    per_checkpoint.push((
                        self.feature_matrix(&ck.params, &qs, kind)?.phi,
                        self.feature_matrix(&ck.params, &train, kind)?.phi,
                    ));
                }
                let mode = if method == Method::TracInCp {
                    Similarity::Dot
                } else {
                    Similarity::Cosine
                };
                checkpoint_similarity_scores(&per_checkpoint, mode)?
            }
            Method::JourneyTrak => {
                let kind = kind.expect("gradient method");
                let model = self.model()?;
                meta.model_digests.push(model.params.digest());
                let (phi, _) = self.ensure_features(kind, &model.params)?;
                let projector = self.projector(&model.params)?;
                let rows = queries
                    .iter()
                    .map(|q| {
                        let steps = self.journey_features(&model.params, q, kind, &projector)?;
                        journey_trak_score(&steps, &phi.phi, &kcfg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                matrix(rows)?
            }
            Method::GradDot | Method::GradCos | Method::Trak | Method::DTrak | Method::RelativeIf | Method::RenormIf => {
                let kind = kind.expect("gradient method");
                let model = self.model()?;
                meta.model_digests.push(model.params.digest());
                let (phi, q) = self.ensure_features(kind, &model.params)?;
                match method {
                    Method::GradDot => similarity_scores(&q.phi, &phi.phi, Similarity::Dot)?,
                    Method::GradCos => similarity_scores(&q.phi, &phi.phi, Similarity::Cosine)?,
                    Method::RelativeIf => relative_if_scores(&q.phi, &phi.phi, &kcfg)?,
                    Method::RenormIf => renorm_if_scores(&q.phi, &phi.phi, &kcfg)?,
                    _ => trak_scores(&q.phi, &phi.phi, &kcfg)?,
                }
            }
        };
        Ok(AttributionScoreMatrix { scores, meta })
    }

    fn matching_benchmark(&self, meta: &ScoreMeta) -> Result<LdsBenchmark> {
        let bench = self.benchmark()?;
        if bench.query_ids != meta.query_ids || bench.num_train() != meta.train_ids.len() {
            return Err(Error::Validation("benchmark does not match the query and training sets".into()));
        }
        Ok(bench)
    }

    /// Features of the sampler states of one query. Generated queries replay
    /// their sampling trajectory; other queries use forward-diffused states
    /// at the sampler timesteps.
    fn journey_features(&self, params: &ModelParams, q: &Query, kind: LossKind, projector: &Projector) -> Result<Vec<Vec<f64>>> {
        let steps = self.cfg.benchmark.ddim_steps;
        let noise_seed = self.cfg.seeds().feature_noise;
        let states: Vec<(Vec<f64>, usize)> = match q.gen_seed {
            Some(seed) => ddim_sample_with_trajectory(params, &self.sched, steps, seed)?.1,
            None => ddim_timesteps(self.sched.num_timesteps(), steps)?
                .into_iter()
                .map(|t| {
                    let eps = StreamKey::new(noise_seed, Purpose::FeatureNoise)
                        .sample(q.id)
                        .model(1)
                        .timestep(t as u64)
                        .stream()
                        .gaussian_vec(q.x.len());
                    forward_diffuse(&q.x, t, &eps, &self.sched).map(|x| (x, t))
                })
                .collect::<Result<_>>()?,
        };
        // Draw index space separate from the query's regular feature noise.
        let key = feature_key(noise_seed, q.id).model(2);
        let grads = states
            .par_iter()
            .map(|(x, t)| {
                single_timestep_gradient(
                    params,
                    x,
                    *t,
                    kind,
                    self.cfg.methods.journey_resamples,
                    &self.sched,
                    &key,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        projector.project_all(&grads)
    }

    /// LDS of a kernel method for every lambda in the config grid. The
    /// choice among them is left to the caller.
    pub fn lambda_sweep(&self, method: Method, loss: Option<LossKind>) -> Result<Vec<SweepPoint>> {
        if !uses_kernel(method) {
            return Err(Error::param(format!("method {method} has no lambda")));
        }
        let bench = self.benchmark()?;
        let points = self
            .cfg
            .kernel
            .grid
            .iter()
            .map(|&lambda| {
                let s = self.compute_scores(method, loss, lambda)?;
                Ok(SweepPoint {
                    lambda,
                    lds: lds_checked(&bench, &s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let path = self.layout.result(&format!("sweep-{}", self.score_name(method, loss, None)));
        ensure_parent(&path)?;
        save_json(&path, &points)?;
        Ok(points)
    }

    /// Removes the top-scoring training samples of each generated query,
    /// retrains and compares generations against a uniform-removal control.
    pub fn counterfactual(&self, scores: &AttributionScoreMatrix, label: &str) -> Result<CounterfactualReport> {
        let train = self.train_samples()?;
        if scores.meta.train_ids != train.iter().map(|s| s.id).collect::<Vec<_>>() {
            return Err(Error::Validation("score columns do not match the training set".into()));
        }
        let queries = self.queries()?;
        let targets = queries
            .iter()
            .filter_map(|q| q.gen_seed.map(|seed| (q.id, seed)))
            .map(|(id, gen_seed)| {
                let row = scores
                    .meta
                    .query_ids
                    .iter()
                    .position(|&qid| qid == id)
                    .ok_or_else(|| Error::Validation(format!("scores lack query {id}")))?;
                Ok(CounterfactualTarget {
                    gen_seed,
                    scores: scores.row(row).to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds = self.cfg.seeds();
        let embedder = RandomProjectionEmbedder {
            seed: seeds.embedder,
            input_dim: self.cfg.data.dim,
            dim: self.cfg.methods.embed_dim,
        };
        let report = counterfactual_run(
            scores.meta.method.name(),
            &train,
            &targets,
            &self.cfg.arch(),
            &self.sched,
            &self.cfg.train_config(),
            &CounterfactualConfig {
                k: self.cfg.counterfactual.k,
                ddim_steps: self.cfg.benchmark.ddim_steps,
                random_seed: seeds.removal,
            },
            &embedder,
        )?;
        let path = self.layout.result(&format!("counterfactual-{label}"));
        ensure_parent(&path)?;
        save_json(&path, &report)?;
        Ok(report)
    }

    /// `out[n][q] = F(q; without n) - F(q; full)` with the raw loss as `F`.
    pub fn loo_oracle(&self) -> Result<Matrix> {
        let train = self.train_samples()?;
        let queries = self.queries()?;
        let out = loo_oracle(
            &train,
            &self.cfg.arch(),
            &self.sched,
            &self.cfg.train_config(),
            &self.cfg.benchmark.output_spec(),
            &queries.iter().map(Query::sample).collect::<Vec<_>>(),
            self.cfg.seeds().output,
        )?;
        let meta = serde_json::json!({
            "kind": "leave-one-out",
            "train_ids": train.iter().map(|s| s.id).collect::<Vec<_>>(),
            "query_ids": queries.iter().map(|q| q.id).collect::<Vec<_>>(),
            "output_spec": self.cfg.benchmark.output_spec(),
            "config_digest": self.digest,
        });
        write_matrix_file(&self.layout.loo(), Role::OutputTensor, Dtype::F64, &out, &meta)?;
        Ok(out)
    }

    /// Evaluates every saved score matrix and writes `report.csv` and
    /// `report.json`.
    pub fn report(&self) -> Result<Vec<ReportRow>> {
        let bench = self.benchmark()?;
        let mut names = list_scores(&self.layout.scores_dir())?;
        names.sort();
        let mut rows = Vec::new();
        for name in names {
            let s = load_scores(&self.layout.scores(&name))?;
            rows.extend(report_rows(
                &name,
                &bench,
                &s,
                self.cfg.bootstrap.resamples,
                self.cfg.seeds().bootstrap,
            )?);
        }
        write_report(&self.layout, &rows)?;
        Ok(rows)
    }
}

fn list_scores(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "dtrk") {
            if let Some(stem) = p.file_stem() {
                names.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    Ok(names)
}

pub fn write_report(layout: &Layout, rows: &[ReportRow]) -> Result<()> {
    ensure_dir(&layout.root)?;
    crate::store::write_atomic(&layout.report_csv(), report::to_csv(rows).as_bytes())?;
    crate::store::write_atomic(&layout.report_json(), report::to_json(rows).as_bytes())
}

/// Checks that scores and benchmark refer to the same queries and training
/// set, then computes the LDS.
pub fn lds_checked(bench: &LdsBenchmark, scores: &AttributionScoreMatrix) -> Result<LdsResult> {
    check_alignment(bench, scores)?;
    lds(bench, &scores.scores)
}

fn check_alignment(bench: &LdsBenchmark, scores: &AttributionScoreMatrix) -> Result<()> {
    if bench.query_ids != scores.meta.query_ids {
        return Err(Error::Validation("score queries differ from benchmark queries".into()));
    }
    if bench.num_train() != scores.meta.train_ids.len() {
        return Err(Error::Validation(format!(
            "scores cover {} training samples, benchmark {}",
            scores.meta.train_ids.len(),
            bench.num_train()
        )));
    }
    Ok(())
}

/// Query positions of each split present, in split order.
pub fn split_indices(query_ids: &[u64]) -> Vec<(Split, Vec<usize>)> {
    [Split::Validation, Split::Generation]
        .into_iter()
        .map(|s| {
            let idx: Vec<usize> = (0..query_ids.len()).filter(|&i| Split::of_id(query_ids[i]) == s).collect();
            (s, idx)
        })
        .filter(|(_, idx)| !idx.is_empty())
        .collect()
}

/// LDS over all queries and per split.
pub fn lds_summary(name: &str, bench: &LdsBenchmark, scores: &AttributionScoreMatrix) -> Result<LdsSummary> {
    let all = lds_checked(bench, scores)?;
    let splits = split_indices(&bench.query_ids)
        .into_iter()
        .map(|(s, idx)| {
            let r = lds(&bench.select_queries(&idx)?, &scores.scores.select_rows(&idx))?;
            Ok((s.name().to_string(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LdsSummary {
        scores: name.to_string(),
        method: scores.meta.method,
        all,
        splits,
    })
}

pub fn bootstrap_checked(
    bench: &LdsBenchmark,
    scores: &AttributionScoreMatrix,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    check_alignment(bench, scores)?;
    bootstrap_lds(bench, &scores.scores, resamples, seed)
}

/// Report rows of one score matrix: all queries, then each split.
pub fn report_rows(
    name: &str,
    bench: &LdsBenchmark,
    scores: &AttributionScoreMatrix,
    resamples: usize,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    check_alignment(bench, scores)?;
    let mut parts = vec![("all".to_string(), (0..bench.num_queries()).collect::<Vec<_>>())];
    parts.extend(
        split_indices(&bench.query_ids)
            .into_iter()
            .map(|(s, idx)| (s.name().to_string(), idx)),
    );
    let meta = &scores.meta;
    let (loss, timesteps) = match meta.loss {
        Some(l) => (
            l.kind.to_string(),
            format!(
                "{}-{}",
                serde_json::to_value(l.timestep_plan.strategy)?
                    .as_str()
                    .unwrap_or("?"),
                l.timestep_plan.count
            ),
        ),
        None => ("-".to_string(), "-".to_string()),
    };
    let method = if name == meta.method.name() {
        name.to_string()
    } else {
        format!("{}:{name}", meta.method)
    };
    parts
        .into_iter()
        .map(|(split, idx)| {
            let b = bench.select_queries(&idx)?;
            let s = scores.scores.select_rows(&idx);
            let point = lds(&b, &s)?;
            let boot = bootstrap_lds(&b, &s, resamples, seed)?;
            Ok(ReportRow {
                method: method.clone(),
                loss: loss.clone(),
                lambda: meta.lambda,
                split,
                timesteps: timesteps.clone(),
                queries: idx.len(),
                excluded_queries: point.excluded,
                lds: 100.0 * point.mean,
                bootstrap_mean: 100.0 * boot.mean,
                bootstrap_std: 100.0 * boot.std,
                ci_low: 100.0 * boot.ci_low,
                ci_high: 100.0 * boot.ci_high,
            })
        })
        .collect()
}
