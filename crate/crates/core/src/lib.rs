//! Data attribution for diffusion models: DDPM training, projected gradient
//! features, kernel-based attribution scores and counterfactual evaluation.

pub mod attribution;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod store;
pub mod training;

pub use error::{Error, Result};
