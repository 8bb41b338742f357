//! Dense row-major matrices and the two factorizations used for ridge-type
//! systems `(A^T A + lambda I) x = v`: Cholesky of the normal matrix, and a
//! Householder QR of the augmented matrix `[A; sqrt(lambda) I]`, which never
//! forms `A^T A`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len(), "matrix row")?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len(), "matrix payload")?;
        Ok(Self { rows, cols, data })
    }

    /// The rows at `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, v.len(), "matrix-vector product")?;
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `self^T self`, summed in ascending row order.
    pub fn gram(&self) -> Matrix {
        let k = self.cols;
        let mut g = Matrix::zeros(k, k);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..k {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let out = &mut g.data[i * k..(i + 1) * k];
                for j in i..k {
                    out[j] += ri * row[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                g.data[i * k + j] = g.data[j * k + i];
            }
        }
        g
    }

    /// `self^T v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.rows, v.len(), "transposed matrix-vector product")?;
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        check_len(a.rows, a.cols, "square matrix")?;
        let n = a.rows;
        let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        let tol = max_diag * n.max(1) as f64 * f64::EPSILON * 4.0;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if !(d > tol) {
                return Err(Error::Singular {
                    solver: "cholesky",
                    row: j,
                    pivot: d,
                });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, b.len(), "cholesky right-hand side")?;
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= self.l[i * n + p] * y[p];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in i + 1..n {
                s -= self.l[p * n + i] * y[p];
            }
            y[i] = s / self.l[i * n + i];
        }
        Ok(y)
    }
}

/// Upper-triangular `R` with `R^T R = A^T A + lambda I`, computed by
/// Householder QR of `[A; sqrt(lambda) I]`.
#[derive(Debug, Clone)]
pub struct RegularizedQr {
    n: usize,
    r: Vec<f64>,
}

impl RegularizedQr {
    pub fn factor(a: &Matrix, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::param("ridge term must be non-negative"));
        }
        let n = a.cols;
        let m = a.rows + n;
        // column-major working copy of the augmented matrix
        let mut w = vec![0.0; m * n];
        for c in 0..n {
            for r in 0..a.rows {
                w[c * m + r] = a.get(r, c);
            }
            w[c * m + a.rows + c] = lambda.sqrt();
        }
        let col_scale = (0..n)
            .map(|c| norm2(&w[c * m..(c + 1) * m]))
            .fold(0.0, f64::max);
        for k in 0..n {
            let col = &w[k * m + k..(k + 1) * m];
            let alpha_norm = norm2(col);
            if alpha_norm == 0.0 {
                continue;
            }
            let alpha = if col[0] > 0.0 { -alpha_norm } else { alpha_norm };
            let mut v = col.to_vec();
            v[0] -= alpha;
            let vnorm_sq = dot(&v, &v);
            if vnorm_sq > 0.0 {
                for c in k..n {
                    let target = &mut w[c * m + k..(c + 1) * m];
                    let f = 2.0 * dot(&v, target) / vnorm_sq;
                    for (t, vi) in target.iter_mut().zip(&v) {
                        *t -= f * vi;
                    }
                }
            }
        }
        let tol = col_scale * m as f64 * f64::EPSILON * 4.0;
        let mut r = vec![0.0; n * n];
        for c in 0..n {
            for row in 0..=c {
                r[row * n + c] = w[c * m + row];
            }
            let pivot = r[c * n + c];
            if !(pivot.abs() > tol) {
                return Err(Error::Singular {
                    solver: "least-squares",
                    row: c,
                    pivot,
                });
            }
        }
        Ok(Self { n, r })
    }

    /// Solves `R^T R x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, b.len(), "least-squares right-hand side")?;
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= self.r[p * n + i] * y[p];
            }
            y[i] = s / self.r[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in i + 1..n {
                s -= self.r[i * n + p] * y[p];
            }
            y[i] = s / self.r[i * n + i];
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = StreamKey::new(seed, Purpose::Data).stream();
        Matrix::from_vec(rows, cols, s.gaussian_vec(rows * cols)).unwrap()
    }

    #[test]
    fn gram_matches_naive() {
        let a = random_matrix(7, 4, 1);
        let g = a.gram();
        for i in 0..4 {
            for j in 0..4 {
                let naive: f64 = (0..7).map(|r| a.get(r, i) * a.get(r, j)).sum();
                assert!((g.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = random_matrix(10, 5, 2);
        let mut g = a.gram();
        for i in 0..5 {
            g.data[i * 5 + i] += 0.5;
        }
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let x = Cholesky::factor(&g).unwrap().solve(&b).unwrap();
        let back = g.mul_vec(&x).unwrap();
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn qr_route_agrees_with_cholesky() {
        for (seed, lambda) in [(3, 1e-2), (4, 1.0), (5, 1e3)] {
            let a = random_matrix(12, 6, seed);
            let mut g = a.gram();
            for i in 0..6 {
                g.data[i * 6 + i] += lambda;
            }
            let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
            let x1 = Cholesky::factor(&g).unwrap().solve(&b).unwrap();
            let x2 = RegularizedQr::factor(&a, lambda).unwrap().solve(&b).unwrap();
            for (u, v) in x1.iter().zip(&x2) {
                assert!((u - v).abs() < 1e-9 * u.abs().max(1.0), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn rank_deficient_is_singular_for_both() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            Cholesky::factor(&a.gram()),
            Err(Error::Singular {
                solver: "cholesky",
                ..
            })
        ));
        assert!(matches!(
            RegularizedQr::factor(&a, 0.0),
            Err(Error::Singular {
                solver: "least-squares",
                ..
            })
        ));
    }

    #[test]
    fn wide_matrix_needs_ridge() {
        let a = random_matrix(3, 6, 9);
        assert!(Cholesky::factor(&a.gram()).is_err());
        assert!(RegularizedQr::factor(&a, 0.0).is_err());
        assert!(RegularizedQr::factor(&a, 0.1).is_ok());
    }
}
