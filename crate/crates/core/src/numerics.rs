//! Dense kernels: Cholesky factorization, triangular solves, Gaussian and
//! Student-t log-densities, log-gamma and log-sum-exp.
//!
//! Everything here works on `f64` and stays in log space; densities are
//! never exponentiated.

use std::f64::consts::PI;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += weight * x yᵀ`.
    pub fn add_outer(&mut self, weight: f64, x: &[f64], y: &[f64]) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        for (i, xi) in x.iter().enumerate() {
            let w = weight * xi;
            for (a, yj) in self.row_mut(i).iter_mut().zip(y) {
                *a += w * yj;
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Lower-triangular square matrix stored as a packed row-major lower
/// triangle. Entries above the diagonal are zero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn identity(dim: usize) -> Self {
        let mut l = LowerTriangular::zeros(dim);
        for i in 0..dim {
            l.data[packed_index(i, i)] = 1.0;
        }
        l
    }

    pub fn zeros(dim: usize) -> Self {
        LowerTriangular {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn from_packed(dim: usize, data: Vec<f64>) -> Result<Self> {
        let expected = dim * (dim + 1) / 2;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(LowerTriangular { dim, data })
    }

    /// Takes the lower triangle of a square matrix, discarding everything
    /// above the diagonal.
    pub fn from_lower(m: &Matrix) -> Self {
        assert!(m.is_square());
        let dim = m.rows();
        let mut l = LowerTriangular::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                l.data[packed_index(i, j)] = m[(i, j)];
            }
        }
        l
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Entry `(i, j)`; zero above the diagonal.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[packed_index(i, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(j <= i, "write above the diagonal of a lower-triangular factor");
        self.data[packed_index(i, j)] = value;
    }

    pub fn diag(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim).map(move |i| self.data[packed_index(i, i)])
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in 0..=i {
                m[(i, j)] = self.data[packed_index(i, j)];
            }
        }
        m
    }

    /// `L Lᵀ`, exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let ri = &self.data[packed_index(i, 0)..=packed_index(i, i)];
            for j in 0..=i {
                let rj = &self.data[packed_index(j, 0)..=packed_index(j, j)];
                let v = dot(&ri[..=j], rj);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// `log |L| = Σ log L_ii`, half the log-determinant of `L Lᵀ`.
    pub fn log_det(&self) -> f64 {
        self.diag().map(f64::ln).sum()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim);
        let mut y = b.to_vec();
        for i in 0..self.dim {
            let row = &self.data[packed_index(i, 0)..packed_index(i, i)];
            let s = dot(row, &y[..i]);
            y[i] = (y[i] - s) / self.data[packed_index(i, i)];
        }
        y
    }

    /// Solves `Lᵀ x = y` by back substitution.
    pub fn solve_upper_transposed(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.dim);
        let mut x = y.to_vec();
        for i in (0..self.dim).rev() {
            x[i] /= self.data[packed_index(i, i)];
            let xi = x[i];
            let row = &self.data[packed_index(i, 0)..packed_index(i, i)];
            for (xk, lik) in x[..i].iter_mut().zip(row) {
                *xk -= lik * xi;
            }
        }
        x
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper_transposed(&self.solve_lower(b))
    }

    /// `rᵀ (L Lᵀ)⁻¹ r`.
    pub fn mahalanobis_sq(&self, r: &[f64]) -> f64 {
        let z = self.solve_lower(r);
        dot(&z, &z)
    }

    /// `(L Lᵀ)⁻¹` as a dense symmetric matrix.
    pub fn inverse_gram(&self) -> Matrix {
        let n = self.dim;
        // Columns of L⁻¹, then (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹.
        let mut linv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve_lower(&e);
            for i in 0..n {
                linv[(i, j)] = col[i];
            }
        }
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..n {
                    s += linv[(k, i)] * linv[(k, j)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    /// `L x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| dot(&self.data[packed_index(i, 0)..=packed_index(i, i)], &x[..=i]))
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> LowerTriangular {
        LowerTriangular {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factorization `A = L Lᵀ` of a symmetric matrix. Only the lower
/// triangle of `a` is read.
pub fn cholesky(a: &Matrix) -> Result<LowerTriangular> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            found: a.cols(),
        });
    }
    let n = a.rows();
    let mut l = LowerTriangular::zeros(n);
    for j in 0..n {
        let rj = packed_index(j, 0);
        let s = dot(&l.data[rj..rj + j], &l.data[rj..rj + j]);
        let pivot = a[(j, j)] - s;
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let ljj = pivot.sqrt();
        l.data[packed_index(j, j)] = ljj;
        for i in j + 1..n {
            let ri = packed_index(i, 0);
            let s = dot(&l.data[ri..ri + j], &l.data[rj..rj + j]);
            l.data[ri + j] = (a[(i, j)] - s) / ljj;
        }
    }
    Ok(l)
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `log N(x | mu, L Lᵀ)`.
pub fn mvn_logpdf(x: &[f64], mu: &[f64], chol_sigma: &LowerTriangular) -> Result<f64> {
    check_dim(chol_sigma.dim(), x.len())?;
    check_dim(chol_sigma.dim(), mu.len())?;
    let r: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let q = chol_sigma.mahalanobis_sq(&r);
    let d = x.len() as f64;
    Ok(-0.5 * d * LN_2PI - chol_sigma.log_det() - 0.5 * q)
}

/// Log-density of the multivariate Student-t with location `loc`, scale
/// matrix `L Lᵀ` and `dof` degrees of freedom.
pub fn mvt_logpdf(x: &[f64], loc: &[f64], chol_scale: &LowerTriangular, dof: f64) -> Result<f64> {
    check_dim(chol_scale.dim(), x.len())?;
    check_dim(chol_scale.dim(), loc.len())?;
    if !(dof > 0.0) {
        return Err(Error::NonPositiveDof(dof));
    }
    let r: Vec<f64> = x.iter().zip(loc).map(|(a, b)| a - b).collect();
    let q = chol_scale.mahalanobis_sq(&r);
    Ok(student_t_log_norm(dof, x.len()) - chol_scale.log_det() - 0.5 * (dof + x.len() as f64) * (q / dof).ln_1p())
}

/// The `x`-independent part of the Student-t log-density, excluding the
/// scale determinant.
pub(crate) fn student_t_log_norm(dof: f64, dim: usize) -> f64 {
    let d = dim as f64;
    ln_gamma(0.5 * (dof + d)) - ln_gamma(0.5 * dof) - 0.5 * d * (dof * PI).ln()
}

/// `log Σ exp(vᵢ)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::EmptyInput)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// Normalizes log-weights into probabilities.
pub fn softmax(log_weights: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_weights)?;
    Ok(log_weights.iter().map(|v| (v - lse).exp()).collect())
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x) Γ(1 − x) = π / sin(πx).
        return PI.ln() - (PI * x).sin().abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEFFS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Digamma `ψ(x) = d/dx log Γ(x)` for `x > 0`.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Asymptotic series in 1/x².
    let series =
        inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 * inv - series
}
