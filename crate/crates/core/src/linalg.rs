//! Dense row-major matrices, the norm family used by the bounds, softmax and
//! its Jacobian, symmetric eigen-extremes and seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::{Index, IndexMut};

use crate::Error;

/// Reproducible generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Generator for a top-level seed.
pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of `seed`. Example `i` of a dataset always
/// draws from `stream_rng(seed, i)`, so any single example can be regenerated
/// without materialising the others.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, Error> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Matrix { rows: r, cols: c, data: rows.concat() })
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, Error> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "matvec {}x{} by {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ v`.
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vec<f64>, Error> {
        if self.rows != v.len() {
            return Err(Error::Dimension(format!(
                "transposed matvec {}x{} by {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    fn check_same(&self, other: &Matrix, op: &str) -> Result<(), Error> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{op} {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, Error> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, Error> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| c * a).collect() }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) -> Result<(), Error> {
        self.check_same(other, "add_scaled")?;
        axpy(c, &other.data, &mut self.data);
        Ok(())
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Matrix) -> Result<f64, Error> {
        self.check_same(other, "inner")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn softmax(b: &[f64]) -> Result<Vec<f64>, Error> {
    if b.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let m = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = b.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    Ok(out)
}

/// `diag(φ) − φφᵀ` evaluated at `b`.
pub fn softmax_jacobian(b: &[f64]) -> Result<Matrix, Error> {
    let p = softmax(b)?;
    Ok(jacobian_from_probs(&p))
}

/// Softmax Jacobian given the probabilities themselves.
pub fn jacobian_from_probs(p: &[f64]) -> Matrix {
    let n = p.len();
    Matrix::from_fn(n, n, |i, j| if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] })
}

/// `φ′(b) v` without forming the matrix: `φ ⊙ v − φ (φᵀv)`.
pub fn jacobian_apply(p: &[f64], v: &[f64]) -> Vec<f64> {
    let pv = dot(p, v);
    p.iter().zip(v).map(|(pi, vi)| pi * (vi - pv)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Norms {
    pub frobenius: f64,
    pub spectral: f64,
    pub two_inf: f64,
    pub one_inf: f64,
    pub one_two: f64,
    /// False when power iteration hit its iteration cap; `spectral` then
    /// holds the best estimate.
    pub spectral_converged: bool,
}

pub fn norms(a: &Matrix) -> Result<Norms, Error> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Dimension("norms of an empty matrix".into()));
    }
    let (spectral, spectral_converged) = spectral_norm(a, 1e-10, 10_000);
    Ok(Norms {
        frobenius: a.frobenius(),
        spectral,
        two_inf: two_inf(a),
        one_inf: one_inf(a),
        one_two: one_two(a),
        spectral_converged,
    })
}

/// Largest row 2-norm.
pub fn two_inf(a: &Matrix) -> f64 {
    (0..a.rows).map(|i| norm2(a.row(i))).fold(0.0, f64::max)
}

/// Largest absolute entry.
pub fn one_inf(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Largest column 2-norm.
pub fn one_two(a: &Matrix) -> f64 {
    (0..a.cols).map(|j| norm2(&a.col(j))).fold(0.0, f64::max)
}

/// Power iteration on `AᵀA`. Stops once the eigen-residual of the Gram
/// matrix falls under `tol` relative to the estimate.
pub fn spectral_norm(a: &Matrix, tol: f64, max_iter: usize) -> (f64, bool) {
    let n = a.cols;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let gram = |v: &[f64]| a.tmatvec(&a.matvec(v).unwrap()).unwrap();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = gram(&v);
        lambda = dot(&v, &w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return (0.0, true);
        }
        let resid: f64 = w.iter().zip(&v).map(|(wi, vi)| (wi - lambda * vi).powi(2)).sum::<f64>().sqrt();
        if resid <= tol * lambda.abs() {
            return (lambda.max(0.0).sqrt(), true);
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    (lambda.max(0.0).sqrt(), false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EigExtremes {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `max ‖Sv − λv‖` over both extreme pairs.
    pub residual: f64,
}

impl EigExtremes {
    /// Largest eigenvalue magnitude, i.e. `λ_max(|S|)`.
    pub fn abs_max(&self) -> f64 {
        self.lambda_min.abs().max(self.lambda_max.abs())
    }
}

pub const MAX_DENSE_EIG: usize = 2000;

/// Extreme eigenvalues of the symmetrised `(S + Sᵀ)/2`.
pub fn sym_eig_extremes(s: &Matrix) -> Result<EigExtremes, Error> {
    let n = s.rows;
    if s.cols != n {
        return Err(Error::Dimension(format!("eigensolve of a {}x{} matrix", n, s.cols)));
    }
    if n == 0 {
        return Err(Error::Dimension("eigensolve of an empty matrix".into()));
    }
    if n > MAX_DENSE_EIG {
        return Err(Error::TooLarge(format!(
            "dense eigensolve limited to n <= {MAX_DENSE_EIG}, got {n}; use Hessian-vector power iteration"
        )));
    }
    let sym = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let eig = sym.clone().symmetric_eigen();
    let (mut imin, mut imax) = (0, 0);
    for i in 0..n {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
    }
    let resid = |k: usize| {
        let v = eig.eigenvectors.column(k);
        (&sym * v - v * eig.eigenvalues[k]).norm()
    };
    Ok(EigExtremes {
        lambda_min: eig.eigenvalues[imin],
        lambda_max: eig.eigenvalues[imax],
        residual: resid(imin).max(resid(imax)),
    })
}
