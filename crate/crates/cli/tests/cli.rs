use std::path::Path;
use std::process::{Command, Output};

use dtrak_core::attribution::{AttributionScoreMatrix, Method, ScoreMeta};
use dtrak_core::evaluation::{g_tau, LdsBenchmark, Orientation};
use dtrak_core::linalg::Matrix;
use dtrak_core::loss::{LossKind, LossSpec};
use dtrak_core::schedule::TimestepPlan;
use dtrak_core::store::{load_scores, save_benchmark, save_scores, Dtype};

fn dtrak(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtrak"));
    cmd.args(args).env_remove("DTRAK_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Additive benchmark `F_m = sum_{n in mask} w_n` over four samples and the
/// matching score matrix `tau = w`.
fn additive_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let w = [0.5, -1.0, 2.0, 0.25];
    let masks = vec![
        vec![true, true, false, false],
        vec![true, false, true, false],
        vec![false, true, false, true],
        vec![false, false, true, true],
        vec![true, false, false, true],
        vec![false, true, true, false],
    ];
    let bench = LdsBenchmark {
        outputs: masks.iter().map(|m| vec![vec![g_tau(&w, m)]]).collect(),
        masks,
        query_ids: vec![7],
        output_spec: LossSpec::new(LossKind::Simple, TimestepPlan::uniform(10), 1),
        orientation: Orientation::NegatedLoss,
        output_seed: 0,
        config_digest: None,
    };
    let bdir = dir.join("bench");
    std::fs::create_dir_all(&bdir).unwrap();
    save_benchmark(&bdir, &bench).unwrap();
    let scores = AttributionScoreMatrix {
        scores: Matrix::from_rows(&[w.to_vec()]).unwrap(),
        meta: ScoreMeta {
            method: Method::Trak,
            loss: None,
            k: None,
            lambda: None,
            model_digests: vec![],
            query_ids: vec![7],
            train_ids: vec![0, 1, 2, 3],
            config_digest: None,
        },
    };
    let spath = dir.join("tau.dtrk");
    save_scores(&spath, &scores, Dtype::F64).unwrap();
    (bdir, spath)
}

#[test]
fn lds_on_additive_fixture_prints_full_score() {
    let tmp = tempfile::tempdir().unwrap();
    let (bdir, spath) = additive_fixture(tmp.path());
    let out = tmp.path().join("out");
    let o = dtrak(
        &[
            "lds",
            "--scores",
            spath.to_str().unwrap(),
            "--benchmark",
            bdir.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean LDS: 100.0%"), "{}", stdout(&o));
    assert!(out.join("results/lds-tau.json").exists());
}

#[test]
fn bootstrap_on_additive_fixture_has_zero_spread() {
    let tmp = tempfile::tempdir().unwrap();
    let (bdir, spath) = additive_fixture(tmp.path());
    let o = dtrak(
        &[
            "bootstrap",
            "--scores",
            spath.to_str().unwrap(),
            "--benchmark",
            bdir.to_str().unwrap(),
            "--resamples",
            "50",
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("LDS 100.0% +/- 0.0%"), "{}", stdout(&o));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = dtrak(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(dtrak(&[], &[]).status.code(), Some(1));
    assert_eq!(dtrak(&["attribute", "--method", "nope"], &[]).status.code(), Some(1));
    assert_eq!(dtrak(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn corrupted_magic_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (bdir, spath) = additive_fixture(tmp.path());
    let mut bytes = std::fs::read(&spath).unwrap();
    bytes[0] = b'X';
    std::fs::write(&spath, bytes).unwrap();
    let o = dtrak(
        &[
            "lds",
            "--scores",
            spath.to_str().unwrap(),
            "--benchmark",
            bdir.to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_mismatch_names_both_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let (bdir, spath) = additive_fixture(tmp.path());
    let mut bytes = std::fs::read(&spath).unwrap();
    bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
    std::fs::write(&spath, bytes).unwrap();
    let o = dtrak(
        &[
            "lds",
            "--scores",
            spath.to_str().unwrap(),
            "--benchmark",
            bdir.to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('9') && err.contains('1'), "{err}");
}

const TINY: &str = r#"{
    "data": {"n_train": 8, "n_validation": 2, "dim": 4},
    "model": {"time_embed_dim": 4, "hidden_dims": [8]},
    "train": {"epochs": 4, "batch_size": 4, "lr_init": 0.01},
    "features": {"k": 16, "timesteps": {"count": 3, "strategy": "uniform"}},
    "benchmark": {"subsets": {"count": 4, "seeds_per_subset": 1},
                  "output_timesteps": {"count": 5, "strategy": "uniform"},
                  "output_noises": 1, "generated_queries": 2, "ddim_steps": 5},
    "bootstrap": {"resamples": 10},
    "counterfactual": {"k": 2}
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_ok(args: &[&str]) -> Output {
    let o = dtrak(args, &[]);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn attribute_records_method_and_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("out");
    let base = ["--config", cfg.as_str(), "--out", out.to_str().unwrap()];
    let with = |extra: &[&str]| -> Vec<String> {
        extra.iter().chain(base.iter()).map(|s| s.to_string()).collect()
    };
    for step in [
        with(&["gen-data"]),
        with(&["train"]),
        with(&["attribute", "--method", "trak"]),
        with(&["attribute", "--method", "d-trak", "--loss", "square"]),
    ] {
        run_ok(&step.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let trak = load_scores(&out.join("scores/trak.dtrk")).unwrap();
    let dtrak_s = load_scores(&out.join("scores/d-trak.dtrk")).unwrap();
    assert_eq!(trak.meta.method, Method::Trak);
    assert_eq!(dtrak_s.meta.method, Method::DTrak);
    assert_eq!(trak.meta.loss.unwrap().kind, LossKind::Simple);
    assert_eq!(dtrak_s.meta.loss.unwrap().kind, LossKind::Square);
    assert_eq!(trak.meta.loss.unwrap().timestep_plan, TimestepPlan::uniform(3));
    assert_eq!(trak.meta.k, Some(16));
    assert_ne!(trak.scores, dtrak_s.scores);
    assert_eq!(trak.meta.config_digest, dtrak_s.meta.config_digest);
    assert!(trak.meta.config_digest.is_some());
}

#[test]
fn full_command_sequence_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    run_ok(&["gen-data", "--config", &cfg, "--out", o]);
    run_ok(&["train", "--config", &cfg, "--out", o]);
    run_ok(&["train-subsets", "--config", &cfg, "--out", o]);
    run_ok(&["features", "--loss", "square", "--config", &cfg, "--out", o]);
    run_ok(&["attribute", "--method", "d-trak", "--config", &cfg, "--out", o]);
    // Later stages can pick the config up from the output directory.
    run_ok(&["attribute", "--method", "raw-pixel", "--out", o]);
    let sweep = run_ok(&["attribute", "--method", "trak", "--sweep", "--out", o]);
    assert_eq!(stdout(&sweep).lines().count(), 27);
    let scores = out.join("scores/d-trak.dtrk");
    let lds = run_ok(&["lds", "--scores", scores.to_str().unwrap(), "--out", o]);
    assert!(stdout(&lds).contains("mean LDS:"));
    assert!(stdout(&lds).contains("validation:"));
    assert!(stdout(&lds).contains("generation:"));
    run_ok(&["bootstrap", "--scores", scores.to_str().unwrap(), "--out", o]);
    let cf = run_ok(&["counterfactual", "--scores", scores.to_str().unwrap(), "--out", o]);
    assert!(stdout(&cf).contains("random"));
    run_ok(&["loo-oracle", "--out", o]);
    let report = run_ok(&["report", "--out", o]);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(stdout(&report), csv);
    assert!(csv.starts_with("method,loss,lambda,split"));
    // two score files, three splits each
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(out.join("report.json").exists());
    assert!(out.join("features/square-train.dtrk").exists());
    assert!(out.join("loo.dtrk").exists());
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = |name: &str, args: &[&str], envs: &[(&str, &str)]| {
        let out = tmp.path().join(name);
        let mut a = vec!["gen-data", "--config", cfg.as_str(), "--out", out.to_str().unwrap()];
        a.extend_from_slice(args);
        assert!(dtrak(&a, envs).status.success());
        std::fs::read(out.join("data.bin")).unwrap()
    };
    let flag5 = data("a", &["--seed", "5"], &[]);
    let env5 = data("b", &[], &[("DTRAK_SEED", "5")]);
    let both = data("c", &["--seed", "6"], &[("DTRAK_SEED", "5")]);
    let flag6 = data("d", &["--seed", "6"], &[]);
    let plain = data("e", &[], &[]);
    assert_eq!(flag5, env5);
    assert_eq!(both, flag6);
    assert_ne!(flag5, flag6);
    assert_ne!(plain, flag5);
    let bad = dtrak(&["gen-data", "--config", &cfg], &[("DTRAK_SEED", "x")]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn invalid_config_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, r#"{"features": {"k": 0}}"#).unwrap();
    let o = dtrak(&["gen-data", "--config", p.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&p, "{").unwrap();
    let o = dtrak(&["gen-data", "--config", p.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}
