//! The experiment configuration: one JSON document that fixes every stage.
//!
//! All random seeds are derived from the single `seed` field, so overriding
//! it re-randomises the whole experiment consistently.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attribution::{lambda_grid, Similarity, Solver};
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::evaluation::Orientation;
use crate::loss::{LossKind, LossSpec};
use crate::model::{Activation, DenoiserArch};
use crate::rng::derive_seed;
use crate::schedule::{ScheduleParams, TimestepPlan};
use crate::store::Dtype;
use crate::training::{SubsetSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub time_embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            time_embed_dim: 16,
            hidden_dims: vec![64, 64],
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub k: usize,
    pub timesteps: TimestepPlan,
    pub noises_per_timestep: usize,
    /// Storage type of feature files; kernel algebra always runs in f64.
    pub dtype: Dtype,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            k: 256,
            timesteps: TimestepPlan::uniform(10),
            noises_per_timestep: 1,
            dtype: Dtype::F32,
        }
    }
}

impl FeatureConfig {
    pub fn loss_spec(&self, kind: LossKind) -> LossSpec {
        LossSpec::new(kind, self.timesteps, self.noises_per_timestep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSettings {
    /// Ridge term used by `attribute` unless overridden on the command line.
    pub lambda: f64,
    /// Values scanned by a lambda sweep.
    pub grid: Vec<f64>,
    pub solver: Solver,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            lambda: 1e2,
            grid: lambda_grid(),
            solver: Solver::Cholesky,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub subsets: SubsetSpec,
    pub output_timesteps: TimestepPlan,
    pub output_noises: usize,
    pub orientation: Orientation,
    /// Number of generated samples added to the validation queries.
    pub generated_queries: usize,
    /// Sampler steps for generated queries, Journey TRAK and counterfactual
    /// generations.
    pub ddim_steps: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            subsets: SubsetSpec::default(),
            output_timesteps: TimestepPlan::uniform(100),
            output_noises: 3,
            orientation: Orientation::NegatedLoss,
            generated_queries: 16,
            ddim_steps: 50,
        }
    }
}

impl BenchmarkConfig {
    pub fn output_spec(&self) -> LossSpec {
        LossSpec::new(LossKind::Simple, self.output_timesteps, self.output_noises)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    /// Loss used for D-TRAK features.
    pub dtrak_loss: LossKind,
    pub similarity: Similarity,
    /// Extra epochs (besides the final one) whose checkpoints feed TracInCP
    /// and GAS.
    pub checkpoint_epochs: Vec<usize>,
    pub journey_resamples: usize,
    pub datamodel_ridge: f64,
    pub embed_dim: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            dtrak_loss: LossKind::Square,
            similarity: Similarity::Cosine,
            checkpoint_epochs: Vec::new(),
            journey_resamples: 1,
            datamodel_ridge: 1.0,
            embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualSettings {
    pub k: usize,
}

impl Default for CounterfactualSettings {
    fn default() -> Self {
        Self { k: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapSettings {
    pub resamples: usize,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self { resamples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleParams,
    /// Its `seed` field is ignored; training seeds derive from `seed`.
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub kernel: KernelSettings,
    pub benchmark: BenchmarkConfig,
    pub methods: MethodConfig,
    pub counterfactual: CounterfactualSettings,
    pub bootstrap: BootstrapSettings,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            schedule: ScheduleParams::default(),
            train: TrainConfig {
                epochs: 1000,
                batch_size: 16,
                lr_init: 1e-2,
                ..TrainConfig::default()
            },
            features: FeatureConfig::default(),
            kernel: KernelSettings::default(),
            benchmark: BenchmarkConfig::default(),
            methods: MethodConfig::default(),
            counterfactual: CounterfactualSettings::default(),
            bootstrap: BootstrapSettings::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Seeds for every random stage, derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub subsets: u64,
    pub projector: u64,
    pub feature_noise: u64,
    pub output: u64,
    pub generation: u64,
    pub bootstrap: u64,
    pub removal: u64,
    pub embedder: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        self.train.validate()?;
        let sched = self.schedule.build()?;
        self.features.loss_spec(LossKind::Simple).validate(&sched)?;
        self.benchmark.output_spec().validate(&sched)?;
        if self.features.k == 0 {
            return Err(Error::param("features.k must be positive"));
        }
        if self.kernel.lambda < 0.0 || self.kernel.grid.iter().any(|l| *l < 0.0) {
            return Err(Error::param("lambda values must be non-negative"));
        }
        Ok(())
    }

    pub fn arch(&self) -> DenoiserArch {
        DenoiserArch {
            input_dim: self.data.dim,
            time_embed_dim: self.model.time_embed_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            activation: self.model.activation,
            num_timesteps: self.schedule.num_timesteps,
        }
    }

    pub fn seeds(&self) -> Seeds {
        let d = |i| derive_seed(self.seed, i);
        Seeds {
            data: d(1),
            train: d(2),
            subsets: d(3),
            projector: d(4),
            feature_noise: d(5),
            output: d(6),
            generation: d(7),
            bootstrap: d(8),
            removal: d(9),
            embedder: d(10),
        }
    }

    /// Training config with the derived training seed.
    pub fn train_config(&self) -> TrainConfig {
        self.train.with_seed(self.seeds().train)
    }

    pub fn subset_spec(&self) -> SubsetSpec {
        SubsetSpec {
            rng_seed: self.seeds().subsets,
            ..self.benchmark.subsets.clone()
        }
    }

    /// Seeds of the generated queries.
    pub fn generation_seeds(&self) -> Vec<u64> {
        let base = self.seeds().generation;
        (0..self.benchmark.generated_queries as u64)
            .map(|i| derive_seed(base, i))
            .collect()
    }
}
