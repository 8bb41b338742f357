//! Synthetic datasets: flat vectors with a train/validation split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};

/// One training or query vector together with the stable identifier used to
/// key its random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// Optional class label per vector (mixture component, image class).
    pub labels: Vec<u32>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn samples(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter()
            .map(|&i| Sample {
                id: i as u64,
                x: self.vectors[i].clone(),
            })
            .collect()
    }

    pub fn train_samples(&self) -> Vec<Sample> {
        self.samples(&self.train)
    }

    pub fn validation_samples(&self) -> Vec<Sample> {
        self.samples(&self.validation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.iter().any(|v| v.len() != self.dim) {
            return Err(Error::Validation(format!(
                "dataset '{}' has vectors not of dimension {}",
                self.name, self.dim
            )));
        }
        let n = self.vectors.len();
        if self.train.iter().chain(&self.validation).any(|&i| i >= n) {
            return Err(Error::Validation("split index out of range".into()));
        }
        if !self.labels.is_empty() && self.labels.len() != n {
            return Err(Error::Validation("label count differs from vector count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianMixture,
    TinyImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_validation: usize,
    /// Vector dimension; for tiny images this is the side length squared and
    /// must be a perfect square.
    pub dim: usize,
    /// Distance of each mixture mean from the origin.
    pub separation: f64,
    pub noise_std: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianMixture,
            n_train: 64,
            n_validation: 16,
            dim: 8,
            separation: 1.5,
            noise_std: 0.5,
        }
    }
}

pub fn generate(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    if spec.n_train == 0 || spec.dim == 0 {
        return Err(Error::param("dataset needs at least one sample and dimension"));
    }
    let n = spec.n_train + spec.n_validation;
    let (vectors, labels, name) = match spec.kind {
        DatasetKind::GaussianMixture => {
            let (v, l) = gaussian_mixture(n, spec.dim, spec.separation, spec.noise_std, seed);
            (v, l, "gaussian-mixture")
        }
        DatasetKind::TinyImages => {
            let side = (spec.dim as f64).sqrt().round() as usize;
            if side * side != spec.dim || side < 2 {
                return Err(Error::param(format!(
                    "tiny-images needs a square dimension >= 4, got {}",
                    spec.dim
                )));
            }
            let (v, l) = tiny_images(n, side, spec.noise_std, seed);
            (v, l, "tiny-images")
        }
    };
    Ok(Dataset {
        name: name.to_string(),
        dim: spec.dim,
        vectors,
        labels,
        train: (0..spec.n_train).collect(),
        validation: (spec.n_train..n).collect(),
    })
}

/// Two isotropic components with means `+-separation * u` for a seeded unit
/// direction `u`; labels alternate so both splits are balanced.
fn gaussian_mixture(
    n: usize,
    dim: usize,
    separation: f64,
    std: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut dir = StreamKey::new(seed, Purpose::Data).model(1).stream().gaussian_vec(dim);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let mut vectors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        let mut s = StreamKey::new(seed, Purpose::Data).sample(i as u64).stream();
        let x = dir
            .iter()
            .map(|d| sign * separation * d + std * s.next_gaussian())
            .collect();
        vectors.push(x);
        labels.push(label);
    }
    (vectors, labels)
}

/// `side x side` images of a bright horizontal (class 0) or vertical
/// (class 1) bar at a random position on a dark background, plus pixel noise.
/// Pixels are in roughly `[-1, 1]`.
fn tiny_images(n: usize, side: usize, std: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut vectors = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let mut s = StreamKey::new(seed, Purpose::Data).sample(i as u64).stream();
        let pos = s.next_below(side as u64) as usize;
        let mut img = vec![-1.0; side * side];
        for k in 0..side {
            let (r, c) = if label == 0 { (pos, k) } else { (k, pos) };
            img[r * side + c] = 1.0;
        }
        for p in &mut img {
            *p += std * s.next_gaussian();
        }
        vectors.push(img);
        labels.push(label);
    }
    (vectors, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shapes_and_determinism() {
        let spec = DataSpec::default();
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 80);
        assert_eq!(a.train.len(), 64);
        assert_eq!(a.validation.len(), 16);
        a.validate().unwrap();
        assert_ne!(a.vectors, generate(&spec, 4).unwrap().vectors);
    }

    #[test]
    fn mixture_components_are_separated() {
        let spec = DataSpec {
            noise_std: 0.1,
            ..DataSpec::default()
        };
        let d = generate(&spec, 1).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        // same-label pairs point the same way, cross-label pairs the opposite way
        assert!(dot(&d.vectors[0], &d.vectors[2]) > 0.0);
        assert!(dot(&d.vectors[0], &d.vectors[1]) < 0.0);
    }

    #[test]
    fn tiny_images_need_square_dim() {
        let spec = DataSpec {
            kind: DatasetKind::TinyImages,
            dim: 15,
            ..DataSpec::default()
        };
        assert!(generate(&spec, 0).is_err());
        let ok = generate(
            &DataSpec {
                dim: 16,
                ..spec
            },
            0,
        )
        .unwrap();
        assert_eq!(ok.dim, 16);
        ok.validate().unwrap();
    }
}
