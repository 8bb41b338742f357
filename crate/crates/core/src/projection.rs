//! Gaussian random projections `g -> P^T g` with `P` in `R^{d x k}`.
//!
//! Entries are regenerated on demand from `(seed, row, column)` so the matrix
//! is never held in memory. Work is tiled into column blocks and row tiles;
//! every output coordinate is still summed in ascending row order, so the
//! tiling never changes the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{Purpose, StreamKey};

pub const COLUMN_BLOCK: usize = 1024;
const ROW_TILE: usize = 256;

/// Maps raw `d`-dimensional gradients to `k`-dimensional features.
pub trait GradientProjector: Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Projects every gradient; output row `i` corresponds to `grads[i]`.
    fn project_all(&self, grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;

    fn project(&self, grad: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project_all(&[grad.to_vec()])?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projector {
    pub seed: u64,
    pub d: usize,
    pub k: usize,
}

impl Projector {
    pub fn new(seed: u64, d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::param("projection dimensions must be positive"));
        }
        Ok(Self { seed, d, k })
    }

    /// `P[i][j] ~ N(0, 1)`, a pure function of `(seed, i, j)`.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        StreamKey::new(self.seed, Purpose::Projection)
            .sample(i as u64)
            .timestep(j as u64)
            .stream()
            .next_gaussian()
    }

    /// Projection with an explicit column-block size.
    pub fn project_all_blocked(&self, grads: &[Vec<f64>], block: usize) -> Result<Vec<Vec<f64>>> {
        if block == 0 {
            return Err(Error::param("column block size must be positive"));
        }
        for g in grads {
            check_len(self.d, g.len(), "gradient for projection")?;
        }
        let starts: Vec<usize> = (0..self.k).step_by(block).collect();
        let blocks: Vec<Vec<Vec<f64>>> = starts
            .par_iter()
            .map(|&j0| {
                let j1 = (j0 + block).min(self.k);
                let width = j1 - j0;
                let mut out = vec![vec![0.0; width]; grads.len()];
                let mut tile = vec![0.0; ROW_TILE * width];
                for i0 in (0..self.d).step_by(ROW_TILE) {
                    let i1 = (i0 + ROW_TILE).min(self.d);
                    for i in i0..i1 {
                        let row = &mut tile[(i - i0) * width..(i - i0 + 1) * width];
                        for (c, p) in row.iter_mut().enumerate() {
                            *p = self.entry(i, j0 + c);
                        }
                    }
                    for (g, o) in grads.iter().zip(out.iter_mut()) {
                        for i in i0..i1 {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &tile[(i - i0) * width..(i - i0 + 1) * width];
                            for (acc, p) in o.iter_mut().zip(row) {
                                *acc += p * gi;
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let mut result = vec![Vec::with_capacity(self.k); grads.len()];
        for b in blocks {
            for (r, part) in result.iter_mut().zip(b) {
                r.extend(part);
            }
        }
        Ok(result)
    }
}

impl GradientProjector for Projector {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn output_dim(&self) -> usize {
        self.k
    }

    fn project_all(&self, grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.project_all_blocked(grads, COLUMN_BLOCK)
    }
}

/// `P = I`; features are the raw averaged gradients. Meant for checks that
/// must isolate the gradient path from the random projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityProjector {
    pub d: usize,
}

impl GradientProjector for IdentityProjector {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn output_dim(&self) -> usize {
        self.d
    }

    fn project_all(&self, grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for g in grads {
            check_len(self.d, g.len(), "gradient for projection")?;
        }
        Ok(grads.to_vec())
    }
}
