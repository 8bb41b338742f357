use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtrak_core::attribution::Method;
use dtrak_core::config::ExperimentConfig;
use dtrak_core::loss::LossKind;
use dtrak_core::pipeline::{bootstrap_checked, lds_summary, Experiment, Layout};
use dtrak_core::store::{load_benchmark, load_json, load_scores, save_json};

#[derive(Parser)]
#[command(name = "dtrak", version, about = "Data attribution for diffusion models")]
struct Cli {
    /// Experiment config (JSON). Defaults to <out>/config.json if present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config and DTRAK_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the full model and build the query set.
    Train,
    /// Train the subset models and build the LDS benchmark.
    TrainSubsets,
    /// Compute projected gradient features of training samples and queries.
    Features {
        #[arg(long, default_value = "simple")]
        loss: LossKind,
    },
    /// Compute attribution scores for every query.
    Attribute {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Print the LDS for every lambda of the config grid instead.
        #[arg(long, conflicts_with = "lambda")]
        sweep: bool,
    },
    /// Linear datamodeling score of a score matrix.
    Lds {
        #[arg(long)]
        scores: PathBuf,
        /// Benchmark directory; defaults to <out>/benchmark.
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Bootstrap mean, standard deviation and 95% interval of the LDS.
    Bootstrap {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Remove top-attributed samples of each generated query and retrain.
    Counterfactual {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Leave-one-out differences of the model output for every query.
    LooOracle,
    /// Evaluate every saved score matrix into report.csv and report.json.
    Report,
}

enum Failure {
    Usage(String),
    Core(dtrak_core::Error),
}

impl From<dtrak_core::Error> for Failure {
    fn from(e: dtrak_core::Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

#[derive(serde::Deserialize)]
struct Recorded {
    config: ExperimentConfig,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Core(dtrak_core::Error::Validation(format!("cannot read {}: {e}", path.display())))
            })?;
            ExperimentConfig::from_json(&text).map_err(as_data_error)?
        }
        (None, Some(out)) if Layout::new(out).config().exists() => {
            load_json::<Recorded>(&Layout::new(out).config())?.config
        }
        _ => ExperimentConfig::default(),
    };
    if let Ok(v) = std::env::var("DTRAK_SEED") {
        cfg.seed = v
            .parse()
            .map_err(|_| Failure::Usage(format!("DTRAK_SEED is not a u64: '{v}'")))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// A bad config file is a data problem, not a usage problem.
fn as_data_error(e: dtrak_core::Error) -> Failure {
    match e {
        dtrak_core::Error::Parameter(msg) => Failure::Core(dtrak_core::Error::Validation(format!("config: {msg}"))),
        other => Failure::Core(other),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scores".into(), |s| s.to_string_lossy().into_owned())
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli)?;
    let exp = Experiment::new(cfg).map_err(as_data_error)?;
    let layout = exp.layout.clone();
    match cli.command {
        Command::GenData => {
            let d = exp.gen_data()?;
            println!(
                "{}: {} vectors of dimension {} ({} train, {} validation) -> {}",
                d.name,
                d.len(),
                d.dim,
                d.train.len(),
                d.validation.len(),
                layout.dataset().display()
            );
        }
        Command::Train => {
            let ck = exp.train()?;
            println!("trained {} epochs -> {}", ck.epoch, layout.model().display());
            println!("queries -> {}", layout.queries().display());
        }
        Command::TrainSubsets => {
            let b = exp.train_subsets()?;
            println!(
                "{} subsets x {} seeds, {} queries -> {}",
                b.num_subsets(),
                b.num_seeds(),
                b.num_queries(),
                layout.benchmark().display()
            );
        }
        Command::Features { loss } => {
            let (t, q) = exp.features(loss)?;
            println!("features ({loss}): train {}x{}, queries {}x{}", t.n(), t.k(), q.n(), q.k());
        }
        Command::Attribute {
            method,
            loss,
            lambda,
            sweep,
        } => {
            if sweep {
                for p in exp.lambda_sweep(method, loss)? {
                    println!("lambda {:>10}  mean LDS {}  excluded {}", p.lambda, pct(p.lds.mean), p.lds.excluded);
                }
            } else {
                let (path, s) = exp.attribute(method, loss, lambda)?;
                println!(
                    "{method}: {}x{} scores -> {}",
                    s.scores.rows,
                    s.scores.cols,
                    path.display()
                );
            }
        }
        Command::Lds { scores, benchmark } => {
            let bench = load_benchmark(&benchmark.unwrap_or_else(|| layout.benchmark()))?;
            let s = load_scores(&scores)?;
            let name = stem(&scores);
            let summary = lds_summary(&name, &bench, &s)?;
            println!("mean LDS: {}", pct(summary.all.mean));
            println!("excluded queries: {}", summary.all.excluded);
            if summary.splits.len() > 1 {
                for (split, r) in &summary.splits {
                    println!("{split}: {} (excluded {})", pct(r.mean), r.excluded);
                }
            }
            let path = layout.result(&format!("lds-{name}"));
            if std::fs::create_dir_all(path.parent().unwrap()).is_ok() {
                save_json(&path, &summary)?;
            }
        }
        Command::Bootstrap {
            scores,
            benchmark,
            resamples,
        } => {
            let bench = load_benchmark(&benchmark.unwrap_or_else(|| layout.benchmark()))?;
            let s = load_scores(&scores)?;
            let r = bootstrap_checked(
                &bench,
                &s,
                resamples.unwrap_or(exp.cfg.bootstrap.resamples),
                exp.cfg.seeds().bootstrap,
            )?;
            println!(
                "LDS {} +/- {} (95% interval {} to {}, {} resamples, {} degenerate)",
                pct(r.mean),
                pct(r.std),
                pct(r.ci_low),
                pct(r.ci_high),
                r.resamples,
                r.degenerate
            );
            let path = layout.result(&format!("bootstrap-{}", stem(&scores)));
            if std::fs::create_dir_all(path.parent().unwrap()).is_ok() {
                save_json(&path, &r)?;
            }
        }
        Command::Counterfactual { scores } => {
            let s = load_scores(&scores)?;
            let report = exp.counterfactual(&s, &stem(&scores))?;
            for row in &report.rows {
                println!(
                    "{:<12} K={}  median l2 {:.4}  median cosine {:.4}",
                    row.method, report.k, row.median_l2, row.median_cosine
                );
            }
        }
        Command::LooOracle => {
            let m = exp.loo_oracle()?;
            println!("leave-one-out {}x{} -> {}", m.rows, m.cols, layout.loo().display());
        }
        Command::Report => {
            let rows = exp.report()?;
            print!("{}", dtrak_core::report::to_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
