//! Small dense linear algebra for desk-scale dimensions (d ≤ a few dozen).
//!
//! Provides exactly what the density machinery needs: a row-major matrix,
//! Cholesky factorization of SPD scale matrices (solve, inverse, log-det,
//! quadratic forms) and LU with partial pivoting for general basis matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Matrix from row-major data; `data.len()` must equal `rows · cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(alloc::format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "matrix entry".into(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Diagonal matrix from entries.
    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Number of rows.
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Entry (i, j).
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Set entry (i, j).
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Underlying row-major data.
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Transposed-matrix-vector product, Aᵀx.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.get(i, j) * xi;
            }
        }
        out
    }

    /// Submatrix with the given row and column index sets.
    pub fn select(&self, row_idx: &[usize], col_idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(row_idx.len(), col_idx.len());
        for (i, &ri) in row_idx.iter().enumerate() {
            for (j, &cj) in col_idx.iter().enumerate() {
                m.set(i, j, self.get(ri, cj));
            }
        }
        m
    }

    /// True when symmetric within `tol` on every pair.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if math::abs(self.get(i, j) - self.get(j, i)) > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Cholesky factorization Σ = LLᵀ of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factor an SPD matrix; fails with [`Error::NotPositiveDefinite`] when a
    /// pivot is not strictly positive.
    pub fn factor(sigma: &Matrix) -> Result<Self> {
        let n = sigma.rows();
        if sigma.cols() != n || !sigma.is_symmetric(1e-8 * (1.0 + frobenius(sigma))) {
            return Err(Error::NotPositiveDefinite);
        }
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = sigma.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l.set(i, j, math::sqrt(s));
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(Self { l })
    }

    /// Dimension of the factored matrix.
    #[inline]
    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Lower-triangular factor L.
    #[inline]
    pub fn l(&self) -> &Matrix {
        &self.l
    }

    /// ln |Σ| = 2 Σ_i ln L_ii.
    pub fn ln_det(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * math::ln(self.l.get(i, i))).sum()
    }

    /// Solve L z = b (forward substitution).
    pub fn solve_l(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l.get(i, k) * z[k];
            }
            z[i] = s / self.l.get(i, i);
        }
        z
    }

    /// Solve Σ x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut z = self.solve_l(b);
        // Back substitution with Lᵀ.
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * z[k];
            }
            z[i] = s / self.l.get(i, i);
        }
        z
    }

    /// Quadratic form xᵀ Σ⁻¹ x = ‖L⁻¹x‖².
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.solve_l(x).iter().map(|z| z * z).sum()
    }

    /// Σ⁻¹ as a dense matrix.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e);
            e[j] = 0.0;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }

    /// y = L x (used to color standard-normal draws).
    pub fn l_matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..=i).map(|k| self.l.get(i, k) * x[k]).sum())
            .collect()
    }
}

fn frobenius(m: &Matrix) -> f64 {
    math::sqrt(m.data().iter().map(|v| v * v).sum())
}

/// LU factorization with partial pivoting for general square matrices.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    /// Factor a square matrix; fails on singularity to working precision.
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::InvalidArgument("LU requires a square matrix".into()));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let mut pivot = col;
            let mut best = math::abs(lu.get(col, col));
            for r in (col + 1)..n {
                let v = math::abs(lu.get(r, col));
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best < 1e-300 {
                return Err(Error::SingularMatrix);
            }
            if pivot != col {
                for j in 0..n {
                    let tmp = lu.get(col, j);
                    lu.set(col, j, lu.get(pivot, j));
                    lu.set(pivot, j, tmp);
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            let d = lu.get(col, col);
            for r in (col + 1)..n {
                let f = lu.get(r, col) / d;
                lu.set(r, col, f);
                for j in (col + 1)..n {
                    lu.set(r, j, lu.get(r, j) - f * lu.get(col, j));
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    /// Determinant of the factored matrix.
    pub fn det(&self) -> f64 {
        let mut d = self.sign;
        for i in 0..self.lu.rows() {
            d *= self.lu.get(i, i);
        }
        d
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lu.get(i, k) * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lu.get(i, k) * x[k];
            }
            x[i] = s / self.lu.get(i, i);
        }
        x
    }

    /// Solve Aᵀ w = b.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        // PA = LU gives Aᵀ = Uᵀ Lᵀ P: solve Uᵀ z = b, then Lᵀ v = z, then
        // undo the row permutation.
        let n = self.lu.rows();
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.lu.get(k, i) * z[k];
            }
            z[i] = s / self.lu.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.lu.get(k, i) * z[k];
            }
            z[i] = s;
        }
        let mut w = vec![0.0; n];
        for i in 0..n {
            w[self.perm[i]] = z[i];
        }
        w
    }
}

/// Orthonormalize a list of vectors by modified Gram-Schmidt; near-dependent
/// vectors are dropped.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for q in &basis {
            let dot: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= dot * qi;
            }
        }
        let norm = math::sqrt(w.iter().map(|x| x * x).sum());
        if norm > 1e-10 {
            for wi in &mut w {
                *wi /= norm;
            }
            basis.push(w);
        }
    }
    basis
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m = a.clone();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if math::abs(apq) < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + math::sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + math::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
            }
        }
    }
    (0..n).map(|i| m.get(i, i)).collect()
}

/// Largest principal angle between two subspaces, in degrees.
///
/// The subspaces are given by spanning vector lists; cosines of the
/// principal angles are the singular values of Q_uᵀQ_v for orthonormal bases.
pub fn largest_principal_angle_deg(u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let qu = gram_schmidt(u);
    let qv = gram_schmidt(v);
    if qu.is_empty() || qv.is_empty() || qu.len() != qv.len() {
        return 90.0;
    }
    let k = qu.len();
    let mut cross = Matrix::zeros(k, k);
    for (i, a) in qu.iter().enumerate() {
        for (j, b) in qv.iter().enumerate() {
            cross.set(i, j, a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
    }
    // Gram matrix of the cross products; eigenvalues are squared cosines.
    let mut gram = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..k {
                s += cross.get(i, l) * cross.get(j, l);
            }
            gram.set(i, j, s);
        }
    }
    let eig = symmetric_eigenvalues(&gram);
    let mut min_sq = 1.0f64;
    for e in eig {
        let clamped = if e < 0.0 {
            0.0
        } else if e > 1.0 {
            1.0
        } else {
            e
        };
        if clamped < min_sq {
            min_sq = clamped;
        }
    }
    libm::acos(math::sqrt(min_sq)) * 180.0 / core::f64::consts::PI
}

/// Per-column means of an n×d sample matrix.
pub fn column_means(sample: &Matrix) -> Vec<f64> {
    let n = sample.rows().max(1);
    let mut mu = vec![0.0; sample.cols()];
    for i in 0..sample.rows() {
        for (j, m) in mu.iter_mut().enumerate() {
            *m += sample.get(i, j);
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    mu
}

/// Unbiased sample covariance (denominator n−1) of an n×d sample matrix.
pub fn sample_covariance(sample: &Matrix) -> Result<Matrix> {
    let n = sample.rows();
    let d = sample.cols();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "covariance needs at least two observations".into(),
        ));
    }
    let mu = column_means(sample);
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = sample.get(i, a) - mu[a];
            for b in a..d {
                let db = sample.get(i, b) - mu[b];
                cov.set(a, b, cov.get(a, b) + da * db);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov.get(a, b) / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    Ok(cov)
}

/// Per-column unbiased standard deviations of an n×d sample matrix.
pub fn column_sds(sample: &Matrix) -> Vec<f64> {
    let n = sample.rows();
    let d = sample.cols();
    if n < 2 {
        return vec![0.0; d];
    }
    let mu = column_means(sample);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, v) in var.iter_mut().enumerate() {
            let diff = sample.get(i, j) - mu[j];
            *v += diff * diff;
        }
    }
    var.iter().map(|v| math::sqrt(v / (n - 1) as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Matrix {
        Matrix::from_rows(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0]).unwrap()
    }

    #[test]
    fn cholesky_reconstructs() {
        let s = spd3();
        let ch = Cholesky::factor(&s).unwrap();
        let l = ch.l();
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += l.get(i, k) * l.get(j, k);
                }
                assert!((v - s.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_solve_and_quad_form() {
        let s = spd3();
        let ch = Cholesky::factor(&s).unwrap();
        let b = [1.0, -2.0, 0.5];
        let x = ch.solve(&b);
        let back = s.matvec(&x);
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-12);
        }
        let q = ch.quad_form(&b);
        let direct: f64 = b.iter().zip(&x).map(|(a, c)| a * c).sum();
        assert!((q - direct).abs() < 1e-12);
    }

    #[test]
    fn cholesky_inverse_and_ln_det() {
        let s = Matrix::from_rows(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let ch = Cholesky::factor(&s).unwrap();
        assert!((ch.ln_det() - math::ln(3.0)).abs() < 1e-12);
        let inv = ch.inverse();
        // Inverse of [[2,1],[1,2]] is [[2,-1],[-1,2]]/3.
        assert!((inv.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((inv.get(0, 1) + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = Matrix::from_rows(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            Cholesky::factor(&s),
            Err(crate::Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn lu_det_and_solve() {
        let a = Matrix::from_rows(3, 3, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let lu = Lu::factor(&a).unwrap();
        assert!((lu.det() - 2.0).abs() < 1e-12);
        let b = [3.0, -1.0, 2.0];
        let x = lu.solve(&b);
        let back = a.matvec(&x);
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_solve_transpose() {
        let a = Matrix::from_rows(3, 3, vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.5, 1.0]).unwrap();
        let lu = Lu::factor(&a).unwrap();
        let b = [1.0, 2.0, -0.5];
        let w = lu.solve_transpose(&b);
        let back = a.tr_matvec(&w);
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-12, "component {i}");
        }
    }

    #[test]
    fn lu_detects_singularity() {
        let a = Matrix::from_rows(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(Lu::factor(&a), Err(crate::Error::SingularMatrix)));
    }

    #[test]
    fn covariance_oracle() {
        // Two points (0,0) and (2,2): mean (1,1), covariance [[2,2],[2,2]]/1.
        let s = Matrix::from_rows(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let mu = column_means(&s);
        assert_eq!(mu, vec![1.0, 1.0]);
        let c = sample_covariance(&s).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.get(i, j) - 2.0).abs() < 1e-12);
            }
        }
        let sds = column_sds(&s);
        assert!((sds[0] - math::sqrt(2.0)).abs() < 1e-12);
    }

    #[test]
    fn principal_angle_examples() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let e3 = vec![0.0, 0.0, 1.0];
        let same = largest_principal_angle_deg(
            &[e1.clone(), e2.clone()],
            &[e2.clone(), e1.clone()],
        );
        assert!(same < 1e-6, "same span angle {same}");
        let perp = largest_principal_angle_deg(&[e1.clone(), e2.clone()], &[e1.clone(), e3]);
        assert!((perp - 90.0).abs() < 1e-6, "rotated span angle {perp}");
        // Span rotated by 30 degrees in the (2,3) plane shares e1.
        let c = math::sqrt(3.0) / 2.0;
        let rot = vec![0.0, c, 0.5];
        let ang = largest_principal_angle_deg(&[e1.clone(), e2], &[e1, rot]);
        assert!((ang - 30.0).abs() < 1e-6, "30-degree span angle {ang}");
    }

    #[test]
    fn jacobi_eigenvalues() {
        let m = Matrix::from_rows(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let mut e = symmetric_eigenvalues(&m);
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((e[0] - 1.0).abs() < 1e-10);
        assert!((e[1] - 3.0).abs() < 1e-10);
    }
}
