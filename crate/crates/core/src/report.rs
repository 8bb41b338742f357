//! LDS result tables: CSV with two decimals, JSON at full precision.
//!
//! LDS values are reported in percent.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Loss functional of the features, `-` for methods without one.
    pub loss: String,
    pub lambda: Option<f64>,
    /// `validation`, `generation` or `all`.
    pub split: String,
    /// Timestep plan of the features, e.g. `uniform-10`.
    pub timesteps: String,
    pub queries: usize,
    pub excluded_queries: usize,
    /// LDS of the full benchmark.
    pub lds: f64,
    pub bootstrap_mean: f64,
    pub bootstrap_std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "method",
    "loss",
    "lambda",
    "split",
    "timesteps",
    "queries",
    "excluded_queries",
    "lds",
    "bootstrap_mean",
    "bootstrap_std",
    "ci_low",
    "ci_high",
];

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "nan".to_string()
    }
}

pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let lambda = r.lambda.map_or_else(|| "-".to_string(), |l| format!("{l}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.loss,
            lambda,
            r.split,
            r.timesteps,
            r.queries,
            r.excluded_queries,
            num(r.lds),
            num(r.bootstrap_mean),
            num(r.bootstrap_std),
            num(r.ci_low),
            num(r.ci_high),
        );
    }
    out
}

pub fn to_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(rows).expect("report rows serialize")
}
