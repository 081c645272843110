//! Small dense linear algebra in double precision.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::dot;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix dims {rows}x{cols}")));
        }
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.entries[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ x`
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Shape(format!(
                "transposed matvec: {}x{} with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.entries[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().zip(&other.entries).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, entries: self.entries.iter().map(|v| v * s).collect() }
    }

    /// `self + s·I`
    pub fn add_diag(&self, s: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.entries[i * self.cols + i] += s;
        }
        m
    }

    /// `(self + selfᵀ)/2`
    pub fn symmetrize(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.entries)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!("cholesky of {}x{} matrix", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> DenseMatrix {
        DenseMatrix { rows: self.n, cols: self.n, entries: self.lower.clone() }
    }

    /// Solves `L v = b`.
    pub fn forward_sub(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut v = b.to_vec();
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * v[k];
            }
            v[i] = s / self.lower[i * n + i];
        }
        v
    }

    /// Solves `Lᵀ x = v`.
    pub fn backward_sub(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = v.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * x[k];
            }
            x[i] = s / self.lower[i * n + i];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::Shape(format!("solve: rhs length {} for n={}", b.len(), self.n)));
        }
        Ok(self.backward_sub(&self.forward_sub(b)))
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows != self.n {
            return Err(Error::Shape(format!("solve: rhs has {} rows for n={}", b.rows, self.n)));
        }
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; b.rows];
        for j in 0..b.cols {
            for i in 0..b.rows {
                col[i] = b.get(i, j);
            }
            let x = self.solve(&col)?;
            for i in 0..b.rows {
                out.set(i, j, x[i]);
            }
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Result<DenseMatrix> {
        self.solve_matrix(&DenseMatrix::identity(self.n))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.lower[i * self.n + i].ln()).sum::<f64>()
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn cholesky_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Cholesky::factor(a)?.solve(b)
}

/// Eigen-decomposition `A = Q diag(λ) Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors stored as columns.
    pub eigenvectors: DenseMatrix,
}

impl SymEigen {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape(format!("eigen of {}x{} matrix", a.rows, a.cols)));
        }
        let eig = SymmetricEigen::new(a.symmetrize().to_nalgebra());
        Ok(Self {
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: DenseMatrix::from_nalgebra(&eig.eigenvectors),
        })
    }

    /// `Q diag(f(λ)) Qᵀ`
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let q = &self.eigenvectors;
        DenseMatrix::from_fn(n, n, |i, j| (0..n).map(|k| q.get(i, k) * fl[k] * q.get(j, k)).sum())
    }

    /// `Qᵀ x`
    pub fn to_eigenbasis(&self, x: &[f64]) -> Vec<f64> {
        self.eigenvectors.matvec_t(x).expect("dimension checked by caller")
    }

    /// `Q c`
    pub fn from_eigenbasis(&self, c: &[f64]) -> Vec<f64> {
        self.eigenvectors.matvec(c).expect("dimension checked by caller")
    }
}

/// Symmetric PSD square root. Eigenvalues in `[-clip, 0)` are treated as zero;
/// anything more negative is an error.
pub fn sqrt_psd(a: &DenseMatrix, clip: f64) -> Result<DenseMatrix> {
    let eig = SymEigen::new(a)?;
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -clip) {
        return Err(Error::NotPositiveDefinite { pivot: 0, value: bad });
    }
    Ok(eig.apply_fn(|l| l.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_spd(n: usize, rng: &mut SeededRng) -> DenseMatrix {
        let g = DenseMatrix::new(n, n, rng.normal_vec(n * n)).unwrap();
        g.matmul(&g.transpose()).unwrap().add_diag(n as f64 * 0.1)
    }

    #[test]
    fn identity_and_diagonal_solves() {
        let b = vec![0.3, -1.2, 4.0];
        assert_eq!(cholesky_solve(&DenseMatrix::identity(3), &b).unwrap(), b);
        let a = DenseMatrix::from_diag(&[2.0, 4.0]);
        let x = cholesky_solve(&a, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15, "{x:?}");
    }

    #[test]
    fn random_spd_multiply_back() {
        let mut rng = SeededRng::new(9);
        for _ in 0..10 {
            let a = random_spd(16, &mut rng);
            let b = rng.normal_vec(16);
            let x = cholesky_solve(&a, &b).unwrap();
            let r = a.matvec(&x).unwrap();
            let res: f64 = r.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(res <= 1e-10 * bn, "residual {res}");
        }
    }

    #[test]
    fn non_spd_names_pivot() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match cholesky_solve(&a, &[1.0, 1.0]) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_psd_squares_back() {
        let mut rng = SeededRng::new(3);
        let a = random_spd(6, &mut rng);
        let s = sqrt_psd(&a, 1e-10).unwrap();
        assert!(s.matmul(&s).unwrap().max_abs_diff(&a) < 1e-9);
    }

    #[test]
    fn log_det_matches_eigenvalues() {
        let mut rng = SeededRng::new(4);
        let a = random_spd(5, &mut rng);
        let ld = Cholesky::factor(&a).unwrap().log_det();
        let e: f64 = SymEigen::new(&a).unwrap().eigenvalues.iter().map(|l| l.ln()).sum();
        assert!((ld - e).abs() < 1e-10);
    }
}
