//! Python bindings. Matrices cross the boundary as lists of rows and
//! configs and metadata as JSON text.

use std::path::PathBuf;

use dtrak_core::attribution::{self, KernelConfig, Method, Solver};
use dtrak_core::config::ExperimentConfig;
use dtrak_core::evaluation;
use dtrak_core::linalg::Matrix;
use dtrak_core::loss::LossKind;
use dtrak_core::pipeline;
use dtrak_core::schedule::{select_timesteps, ScheduleParams, TimestepPlan};
use dtrak_core::store;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: dtrak_core::Error) -> PyErr {
    match e {
        dtrak_core::Error::Parameter(_) => PyValueError::new_err(e.to_string()),
        dtrak_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn parse<T: std::str::FromStr<Err = dtrak_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// The default experiment config as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    json(&ExperimentConfig::default())
}

/// A configured experiment writing to `out_dir`.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    inner: pipeline::Experiment,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config_json = "{}", out_dir = None, seed = None))]
    fn new(config_json: &str, out_dir: Option<PathBuf>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
        if let Some(out) = out_dir {
            cfg.out_dir = out;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            inner: pipeline::Experiment::new(cfg).map_err(to_py)?,
        })
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.digest().to_string()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.layout.root.clone()
    }

    /// Returns the number of generated vectors.
    fn gen_data(&self, py: Python<'_>) -> PyResult<usize> {
        py.detach(|| self.inner.gen_data().map(|d| d.len())).map_err(to_py)
    }

    /// Trains the full model; returns its parameter digest.
    fn train(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| self.inner.train().map(|ck| ck.params.digest()))
            .map_err(to_py)
    }

    /// Trains the subset models; returns (subsets, seeds, queries).
    fn train_subsets(&self, py: Python<'_>) -> PyResult<(usize, usize, usize)> {
        py.detach(|| {
            self.inner
                .train_subsets()
                .map(|b| (b.num_subsets(), b.num_seeds(), b.num_queries()))
        })
        .map_err(to_py)
    }

    /// Training and query feature matrices for a loss such as "square".
    fn features(&self, py: Python<'_>, loss: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let kind: LossKind = parse(loss)?;
        py.detach(|| self.inner.features(kind))
            .map(|(t, q)| (t.phi.row_vecs(), q.phi.row_vecs()))
            .map_err(to_py)
    }

    /// Computes and saves scores; returns the file path.
    #[pyo3(signature = (method, loss = None, lam = None))]
    fn attribute(&self, py: Python<'_>, method: &str, loss: Option<&str>, lam: Option<f64>) -> PyResult<PathBuf> {
        let method: Method = parse(method)?;
        let loss = loss.map(parse::<LossKind>).transpose()?;
        py.detach(|| self.inner.attribute(method, loss, lam))
            .map(|(p, _)| p)
            .map_err(to_py)
    }

    /// `[(lambda, mean LDS)]` over the config grid.
    #[pyo3(signature = (method, loss = None))]
    fn lambda_sweep(&self, py: Python<'_>, method: &str, loss: Option<&str>) -> PyResult<Vec<(f64, f64)>> {
        let method: Method = parse(method)?;
        let loss = loss.map(parse::<LossKind>).transpose()?;
        py.detach(|| self.inner.lambda_sweep(method, loss))
            .map(|pts| pts.into_iter().map(|p| (p.lambda, p.lds.mean)).collect())
            .map_err(to_py)
    }

    /// Counterfactual report of a saved score file, as JSON.
    fn counterfactual(&self, py: Python<'_>, scores_path: PathBuf) -> PyResult<String> {
        let label = scores_path
            .file_stem()
            .map_or_else(|| "scores".into(), |s| s.to_string_lossy().into_owned());
        let report = py
            .detach(|| {
                let s = store::load_scores(&scores_path)?;
                self.inner.counterfactual(&s, &label)
            })
            .map_err(to_py)?;
        json(&report)
    }

    /// Leave-one-out differences `[n][q]`.
    fn loo_oracle(&self, py: Python<'_>) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| self.inner.loo_oracle())
            .map(|m| m.row_vecs())
            .map_err(to_py)
    }

    /// Writes report.csv and report.json; returns the CSV text.
    fn report(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| self.inner.report())
            .map(|rows| dtrak_core::report::to_csv(&rows))
            .map_err(to_py)
    }
}

/// Scores and metadata (JSON) of a saved score file.
#[pyfunction]
fn load_scores(path: PathBuf) -> PyResult<(Vec<Vec<f64>>, String)> {
    let s = store::load_scores(&path).map_err(to_py)?;
    Ok((s.scores.row_vecs(), json(&s.meta)?))
}

/// Features and metadata (JSON) of a saved feature file.
#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<(Vec<Vec<f64>>, String)> {
    let f = store::load_features(&path).map_err(to_py)?;
    Ok((f.phi.row_vecs(), json(&f.meta)?))
}

/// Mean LDS of a score file against a benchmark directory.
#[pyfunction]
fn lds(benchmark_dir: PathBuf, scores_path: PathBuf) -> PyResult<f64> {
    let b = store::load_benchmark(&benchmark_dir).map_err(to_py)?;
    let s = store::load_scores(&scores_path).map_err(to_py)?;
    pipeline::lds_checked(&b, &s).map(|r| r.mean).map_err(to_py)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    evaluation::spearman(&a, &b).map_err(to_py)
}

/// TRAK scores `[q][n]` of query features against training features.
#[pyfunction]
#[pyo3(signature = (queries, phi, lam, solver = "cholesky"))]
fn trak_scores(queries: Vec<Vec<f64>>, phi: Vec<Vec<f64>>, lam: f64, solver: &str) -> PyResult<Vec<Vec<f64>>> {
    let solver = match solver {
        "cholesky" => Solver::Cholesky,
        "least-squares" => Solver::LeastSquares,
        other => return Err(PyValueError::new_err(format!("unknown solver '{other}'"))),
    };
    attribution::trak_scores(&matrix(queries)?, &matrix(phi)?, &KernelConfig::new(lam, solver))
        .map(|m| m.row_vecs())
        .map_err(to_py)
}

/// Timesteps chosen by a plan; `strategy` is "uniform" or "cumulative".
#[pyfunction]
#[pyo3(signature = (count, strategy = "uniform", num_timesteps = 1000))]
fn timesteps(count: usize, strategy: &str, num_timesteps: usize) -> PyResult<Vec<usize>> {
    let plan = match strategy {
        "uniform" => TimestepPlan::uniform(count),
        "cumulative" => TimestepPlan::cumulative(count),
        other => return Err(PyValueError::new_err(format!("unknown strategy '{other}'"))),
    };
    select_timesteps(num_timesteps, plan).map_err(to_py)
}

/// `(beta, alpha_bar)` of the default linear schedule.
#[pyfunction]
fn linear_schedule() -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = ScheduleParams::default().build().map_err(to_py)?;
    let t = 1..=s.num_timesteps();
    Ok((t.clone().map(|t| s.beta(t)).collect(), t.map(|t| s.alpha_bar(t)).collect()))
}

#[pyfunction]
fn method_names() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn dtrak(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(load_scores, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(lds, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(trak_scores, m)?)?;
    m.add_function(wrap_pyfunction!(timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(linear_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(method_names, m)?)?;
    Ok(())
}
