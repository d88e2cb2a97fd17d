//! Minimal dense linear algebra for the tiny (D ≤ 3) matrices this crate
//! works with: Cholesky factorization, triangular and SPD solves, log
//! determinants, and products. Everything is row-major `Vec<f64>` with an
//! explicit dimension; nothing here is tape-aware (the training loss builds
//! its own triangular solve out of tape ops).

use thiserror::Error;

/// A symmetric matrix was not positive definite where one was required.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("matrix is not positive definite (pivot {pivot} at row {row})")]
pub struct NotSpdError {
    /// Row at which factorization failed.
    pub row: usize,
    /// The non-positive pivot value encountered.
    pub pivot: f64,
}

/// Square row-major matrix of order `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    n: usize,
    a: Vec<f64>,
}

impl Mat {
    /// Matrix from row-major data; `data.len()` must be `n*n`.
    pub fn from_rows(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "Mat: data length != n*n");
        Mat { n, a: data }
    }

    /// Zero matrix of order `n`.
    pub fn zeros(n: usize) -> Self {
        Mat { n, a: vec![0.0; n * n] }
    }

    /// Identity matrix of order `n`.
    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Diagonal matrix from entries.
    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Matrix order.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self[(i, k)];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += aik * rhs[(k, j)];
                }
            }
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Sum of diagonal entries.
    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// `x' * self * y`.
    pub fn quad_form(&self, x: &[f64], y: &[f64]) -> f64 {
        let my = self.matvec(y);
        x.iter().zip(&my).map(|(a, b)| a * b).sum()
    }

    /// Lower-triangular Cholesky factor `L` with `self = L L'`. Only the
    /// lower triangle of `self` is read.
    pub fn cholesky(&self) -> Result<Mat, NotSpdError> {
        let n = self.n;
        let mut l = Mat::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(NotSpdError { row: i, pivot: s });
                    }
                    l[(i, i)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(l)
    }

    /// `L L'` for a lower-triangular `self`.
    pub fn ll_t(&self) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..=i.min(j) {
                    s += self[(i, k)] * self[(j, k)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    /// Forward substitution: solve `L x = b` for lower-triangular `self`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for j in 0..i {
                s -= self[(i, j)] * x[j];
            }
            x[i] = s / self[(i, i)];
        }
        x
    }

    /// Back substitution: solve `L' x = b` for lower-triangular `self`.
    pub fn solve_lower_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= self[(j, i)] * x[j];
            }
            x[i] = s / self[(i, i)];
        }
        x
    }

    /// Solve `(L L') x = b` given `self = L` (one forward + one back
    /// substitution).
    pub fn spd_solve_from_chol(&self, b: &[f64]) -> Vec<f64> {
        self.solve_lower_transpose(&self.solve_lower(b))
    }

    /// Inverse of `L L'` given `self = L`, column by column.
    pub fn spd_inverse_from_chol(&self) -> Mat {
        let n = self.n;
        let mut out = Mat::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.spd_solve_from_chol(&e);
            for i in 0..n {
                out[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }

    /// `log det (L L')` given `self = L`: twice the sum of log diagonals.
    pub fn logdet_from_chol(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self[(i, i)].ln()).sum::<f64>()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.a[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.a[i * self.n + j]
    }
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        let b = Mat::from_rows(
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut s = b.matmul(&b.transpose());
        for i in 0..n {
            s[(i, i)] += 0.5;
        }
        s
    }

    #[test]
    fn cholesky_recovers_known_factor() {
        // S = L L' with L = [[2,0],[1,3]]
        let s = Mat::from_rows(2, vec![4.0, 2.0, 2.0, 10.0]);
        let l = s.cholesky().unwrap();
        assert_close(l[(0, 0)], 2.0, 1e-12, "l00");
        assert_close(l[(1, 0)], 1.0, 1e-12, "l10");
        assert_close(l[(1, 1)], 3.0, 1e-12, "l11");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = Mat::from_rows(2, vec![1.0, 2.0, 2.0, 1.0]);
        let err = s.cholesky().unwrap_err();
        assert_eq!(err.row, 1);
        assert!(err.pivot <= 0.0);
    }

    #[test]
    fn spd_solve_and_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=3usize {
            for _ in 0..20 {
                let s = random_spd(&mut rng, n);
                let l = s.cholesky().unwrap();
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = l.spd_solve_from_chol(&b);
                let back = s.matvec(&x);
                for i in 0..n {
                    assert_close(back[i], b[i], 1e-9, "S x = b");
                }
                let inv = l.spd_inverse_from_chol();
                let ident = s.matmul(&inv);
                for i in 0..n {
                    for j in 0..n {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert_close(ident[(i, j)], want, 1e-9, "S S^-1 = I");
                    }
                }
            }
        }
    }

    #[test]
    fn logdet_matches_direct_determinant_2x2() {
        let s = Mat::from_rows(2, vec![3.0, 1.0, 1.0, 2.0]);
        let l = s.cholesky().unwrap();
        let det: f64 = 3.0 * 2.0 - 1.0 * 1.0;
        assert_close(l.logdet_from_chol(), det.ln(), 1e-12, "logdet");
    }

    #[test]
    fn ll_t_reconstructs_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_spd(&mut rng, 3);
        let l = s.cholesky().unwrap();
        let back = l.ll_t();
        for i in 0..3 {
            for j in 0..3 {
                assert_close(back[(i, j)], s[(i, j)], 1e-10, "L L' = S");
            }
        }
    }

    #[test]
    fn quad_form_matches_manual() {
        let s = Mat::from_rows(2, vec![1.0, 2.0, 3.0, 4.0]);
        let q = s.quad_form(&[1.0, 1.0], &[1.0, -1.0]);
        // [1 1] * [[1,2],[3,4]] * [1,-1]' = [4,6]*[1,-1]' = -2
        assert_close(q, -2.0, 1e-12, "x'My");
    }
}
