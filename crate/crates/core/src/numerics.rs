//! Dense row-major matrices, a cyclic Jacobi eigensolver for symmetric
//! matrices and a seeded random stream.
//!
//! Everything downstream of file loading runs in `f64`.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

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

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut data = Vec::with_capacity(self.rows * k);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[..k]);
        }
        Matrix::from_raw(self.rows, k, data)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Result<Vec<f64>> {
        if self.rows == 0 {
            return Err(Error::EmptyInput);
        }
        let mut mean = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }

    /// Subtracts `mean` from every row.
    pub fn center_rows(&self, mean: &[f64]) -> Result<Matrix> {
        if mean.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "centering {} columns with a {}-vector",
                self.cols,
                mean.len()
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, &m) in out.data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(mean)
            {
                *v -= m;
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adding {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Largest `|a_ij - a_ji|` of a square matrix.
    pub fn asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
}

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Eigenvalues closer than this (relative to the matrix scale) keep solver order.
pub const EIGENVALUE_TIE: f64 = 1e-12;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps are capped at `100·n`. Eigenvalues are returned in descending order;
/// values equal within [`EIGENVALUE_TIE`] keep the order the rotations left
/// them in.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomposition of a non-square {}x{} matrix",
            n,
            m.cols()
        )));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    if n == 0 {
        return Ok(SymEig {
            values: Vec::new(),
            vectors: Matrix::zeros(0, 0),
        });
    }
    let scale = m.max_abs();
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::NonSymmetric { asymmetry: asym });
    }

    // symmetrize away the tolerated asymmetry
    let mut a = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let frob = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_sweeps = 100 * n;

    let mut converged = false;
    for sweep in 0..max_sweeps {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off == 0.0 || off.sqrt() <= 1e-15 * frob {
            converged = true;
            break;
        }
        let off_abs: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)].abs())
            .sum();
        // skip small rotations in the first sweeps
        let threshold = if sweep < 3 {
            0.2 * off_abs / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let g = 100.0 * apq.abs();
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                if apq.abs() <= threshold || apq == 0.0 {
                    continue;
                }
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: max_sweeps });
    }

    let raw: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let order = descending_order(&raw, EIGENVALUE_TIE * scale.max(1.0));
    let values = order.iter().map(|&i| raw[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

/// One Jacobi rotation annihilating `a[p][q]`, accumulated into `v`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let n = a.rows();
    let apq = a[(p, q)];
    let h = a[(q, q)] - a[(p, p)];
    let t = if (100.0 * apq.abs()) + h.abs() == h.abs() {
        apq / h
    } else {
        let theta = 0.5 * h / apq;
        let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
        if theta < 0.0 {
            -t
        } else {
            t
        }
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for j in 0..n {
        if j == p || j == q {
            continue;
        }
        let g = a[(p, j)];
        let h = a[(q, j)];
        let new_p = g - s * (h + g * tau);
        let new_q = h + s * (g - h * tau);
        a[(p, j)] = new_p;
        a[(j, p)] = new_p;
        a[(q, j)] = new_q;
        a[(j, q)] = new_q;
    }
    for r in 0..n {
        let g = v[(r, p)];
        let h = v[(r, q)];
        v[(r, p)] = g - s * (h + g * tau);
        v[(r, q)] = h + s * (g - h * tau);
    }
}

/// Insertion sort by descending value; near-ties do not move.
fn descending_order(values: &[f64], tie: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && values[order[j]] > values[order[j - 1]] + tie {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    order
}

/// Deterministic random stream. Equal seeds give equal draws.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
