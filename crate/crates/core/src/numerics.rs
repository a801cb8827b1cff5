//! Dense vector and matrix arithmetic.
//!
//! Everything is `f64`. Public constructors reject non-finite entries so that
//! a `Vector` or `Matrix` in hand is always finite; operations that could
//! overflow re-check their output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm guard used by [`l2_normalize`] and [`cosine`].
pub const NORM_EPS: f64 = 1e-12;

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// A finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data, "vector construction")?;
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    /// Callers guarantee finiteness; used by hot loops that already checked.
    pub(crate) fn from_finite(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|x| x.is_finite()));
        Self(data)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scale(&self, a: f64) -> Result<Vector> {
        let out: Vec<f64> = self.0.iter().map(|x| a * x).collect();
        Vector::new(out)
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        same_len(self, other)?;
        Vector::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        same_len(self, other)?;
        Vector::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn same_len(a: &Vector, b: &Vector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy_slice(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Returns `v / max(‖v‖₂, ε)`; the zero vector maps to itself.
pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize empty vector".into()));
    }
    let n = v.norm();
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize".into()));
    }
    if n <= NORM_EPS {
        return Ok(Vector::zeros(v.len()));
    }
    Ok(Vector::from_finite(v.0.iter().map(|x| x / n).collect()))
}

pub fn elementwise_product(a: &Vector, b: &Vector) -> Result<Vector> {
    same_len(a, b)?;
    Vector::new(a.0.iter().zip(&b.0).map(|(x, y)| x * y).collect())
}

pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    same_len(a, b)?;
    let d = dot_slice(&a.0, &b.0);
    if !d.is_finite() {
        return Err(Error::NonFinite("dot".into()));
    }
    Ok(d)
}

/// Cosine similarity, clamped into [-1, 1].
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    same_len(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Degenerate("zero-norm input to cosine".into()));
    }
    Ok((dot_slice(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// `y ← a·x + y`
pub fn axpy(a: f64, x: &Vector, y: &Vector) -> Result<Vector> {
    same_len(x, y)?;
    let mut out = y.0.clone();
    axpy_slice(a, &x.0, &mut out);
    Vector::new(out)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix construction")?;
        Ok(Self { rows, cols, data })
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

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vector::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r.as_slice());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix times length-{} vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let out = (0..self.rows)
            .map(|r| dot_slice(self.row(r), v.as_slice()))
            .collect();
        Vector::new(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for r in 0..self.rows {
            let dst = &mut out[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                axpy_slice(a, other.row(k), dst);
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
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

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense affine map over a batch of rows: `out[n] = x[n]·W + b`, with `W`
/// stored `in_dim × out_dim` row-major. Each row is computed independently
/// and in a fixed order, so a batch of one gives bit-identical results to
/// the same row inside a larger batch.
pub(crate) fn affine_rows(x: &[f64], in_dim: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let out_dim = b.len();
    debug_assert_eq!(w.len(), in_dim * out_dim);
    for (xr, yr) in x.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        yr.copy_from_slice(b);
        for (k, &xv) in xr.iter().enumerate() {
            axpy_slice(xv, &w[k * out_dim..(k + 1) * out_dim], yr);
        }
    }
}

/// Backward of [`affine_rows`]: accumulates `gW += xᵀ·g`, `gb += Σ g`, and
/// writes `gx = g·Wᵀ` when requested.
pub(crate) fn affine_rows_backward(
    x: &[f64],
    in_dim: usize,
    w: &[f64],
    g: &[f64],
    out_dim: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    gx: Option<&mut [f64]>,
) {
    for (xr, gr) in x.chunks_exact(in_dim).zip(g.chunks_exact(out_dim)) {
        for (k, &xv) in xr.iter().enumerate() {
            axpy_slice(xv, gr, &mut gw[k * out_dim..(k + 1) * out_dim]);
        }
        axpy_slice(1.0, gr, gb);
    }
    if let Some(gx) = gx {
        for (gxr, gr) in gx.chunks_exact_mut(in_dim).zip(g.chunks_exact(out_dim)) {
            for (k, v) in gxr.iter_mut().enumerate() {
                *v = dot_slice(&w[k * out_dim..(k + 1) * out_dim], gr);
            }
        }
    }
}
