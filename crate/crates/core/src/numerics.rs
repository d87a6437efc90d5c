//! Small dense linear-algebra kernel.
//!
//! Everything here works on [`Matrix`], a row-major `f64` matrix. Symmetric
//! eigenvalues come from cyclic Jacobi rotations, which keeps small
//! eigenvalues accurate relative to the matrix norm; spectral norms reuse the
//! same routine on the smaller of `M M*` and `M* M`.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Relative tolerance used when deciding that a Gram matrix is singular.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Elementwise symmetry tolerance, scaled by `max(1, max|m_ij|)`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries. Rejects wrong lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// A single column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * self^T`, computed symmetrically.
    pub fn gram_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(self.row(i), self.row(j));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn try_add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn try_sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    /// Adds `c * other` in place.
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Columns `start..start+len`.
    pub fn columns(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column range out of bounds");
        Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    /// Horizontal concatenation. All blocks must share the row count.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Dimension("hstack blocks differ in row count".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            for i in 0..rows {
                out.row_mut(i)[offset..offset + b.cols].copy_from_slice(b.row(i));
            }
            offset += b.cols;
        }
        Ok(out)
    }

    /// Block-diagonal matrix `diag(top, bottom)`.
    pub fn block_diag(top: &Matrix, bottom: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(top.rows + bottom.rows, top.cols + bottom.cols);
        for i in 0..top.rows {
            out.row_mut(i)[..top.cols].copy_from_slice(top.row(i));
        }
        for i in 0..bottom.rows {
            out.row_mut(top.rows + i)[top.cols..].copy_from_slice(bottom.row(i));
        }
        out
    }

    /// The `rows x cols` sub-block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = SYMMETRY_TOLERANCE * self.max_abs().max(1.0);
        (0..self.rows).all(|i| (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs).expect("matrix product dimension mismatch")
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        self.try_add(rhs).expect("matrix sum dimension mismatch")
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        self.try_sub(rhs).expect("matrix difference dimension mismatch")
    }
}

/// `sum_j w_j a_j b_j*` over the columns of `a` and `b`.
pub fn weighted_product(a: &Matrix, b: &Matrix, weights: &[f64]) -> Matrix {
    assert_eq!(a.cols(), weights.len());
    assert_eq!(b.cols(), weights.len());
    let mut out = Matrix::zeros(a.rows(), b.rows());
    let mut scratch = vec![0.0; weights.len()];
    for i in 0..a.rows() {
        for ((s, x), w) in scratch.iter_mut().zip(a.row(i)).zip(weights) {
            *s = x * w;
        }
        for r in 0..b.rows() {
            out.set(i, r, dot(&scratch, b.row(r)));
        }
    }
    out
}

impl Matrix {
    /// `self diag(w) self*`, exactly symmetric.
    pub fn gram_weighted(&self, weights: &[f64]) -> Matrix {
        let mut out = weighted_product(self, self, weights);
        for i in 0..out.rows() {
            for j in 0..i {
                let v = out.get(i, j);
                out.set(j, i, v);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.rows, m.cols)));
    }
    if !m.is_symmetric() {
        return Err(Error::Shape("matrix is not symmetric".into()));
    }
    let mut eig = jacobi_eigenvalues(m);
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.rows;
    // Symmetrize so that tolerated asymmetry does not leak into the rotations.
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    let target = (f64::EPSILON * scale).powi(2);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Dimension("empty matrix".into()));
    }
    Ok(symmetric_eigenvalues(m)?[0])
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig_sym(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Dimension("empty matrix".into()));
    }
    Ok(*symmetric_eigenvalues(m)?.last().unwrap())
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::Dimension("spectral norm of an empty matrix".into()));
    }
    let scale = m.max_abs();
    if scale == 0.0 {
        return Ok(0.0);
    }
    // Pre-scale so that squaring neither overflows nor underflows.
    let scaled = m.scale(1.0 / scale);
    let gram = if m.rows <= m.cols {
        scaled.gram_rows()
    } else {
        scaled.transpose().gram_rows()
    };
    let lmax = *jacobi_eigenvalues(&gram).iter().max_by(|a, b| a.total_cmp(b)).unwrap();
    Ok(lmax.max(0.0).sqrt() * scale)
}

/// Cholesky factor `L` with `g = L L*`, or `None` if a pivot is not positive.
fn cholesky(g: &Matrix) -> Option<Matrix> {
    let n = g.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = g.get(j, j);
        for k in 0..j {
            d -= l.get(j, k).powi(2);
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut s = g.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Some(l)
}

/// Solves `g S = rhs` for symmetric positive definite `g`.
///
/// `g` counts as singular when its smallest eigenvalue is at most
/// [`RANK_TOLERANCE`] times its spectral norm.
pub fn solve_spd(g: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if g.is_empty() {
        return Err(Error::Dimension("empty Gram matrix".into()));
    }
    if g.rows != rhs.rows {
        return Err(Error::Dimension(format!(
            "Gram is {}x{} but right-hand side has {} rows",
            g.rows, g.cols, rhs.rows
        )));
    }
    let eig = symmetric_eigenvalues(g)?;
    let min_eig = eig[0];
    let norm = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tolerance = RANK_TOLERANCE * norm;
    if min_eig.is_nan() || min_eig <= tolerance {
        return Err(Error::SingularGram {
            min_eig,
            tolerance,
            columns: 0,
        });
    }
    let l = cholesky(g).ok_or(Error::SingularGram {
        min_eig,
        tolerance,
        columns: 0,
    })?;
    let n = g.rows;
    let mut out = rhs.clone();
    for c in 0..rhs.cols {
        // forward: L y = b
        for i in 0..n {
            let mut s = out.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * out.get(k, c);
            }
            out.set(i, c, s / l.get(i, i));
        }
        // back: L* x = y
        for i in (0..n).rev() {
            let mut s = out.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * out.get(k, c);
            }
            out.set(i, c, s / l.get(i, i));
        }
    }
    Ok(out)
}
