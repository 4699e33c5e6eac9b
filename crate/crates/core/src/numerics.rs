//! Dense linear-algebra and elementwise primitives.
//!
//! Everything is double precision and row-major. Matrices that play the role
//! of the recurrent state are `d_k x d_v`; a "write" is an outer product
//! `k vᵀ` and a "read" is `Sᵀ q`.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;

/// A dense real vector.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    /// The `i`-th standard basis vector of length `len`.
    pub fn basis(len: usize, i: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[i] = 1.0;
        v
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        Vector((0..len).map(f).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(dot(&self.0, &self.0))
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * s).collect())
    }

    pub fn hadamard(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(self.0.iter().zip(other).map(|(a, b)| a * b).collect())
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        Vector(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        max_abs_diff(&self.0, other)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

/// A dense row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
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
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
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

    /// Builds a matrix whose rows are the given vectors.
    pub fn from_rows(rows: &[Vector], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::sub")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Dense product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "Matrix::matmul",
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(&self.data, &other.data, &mut out.data, self.rows, self.cols, other.cols);
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(dot(&self.data, &self.data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        Ok(())
    }
}

fn check_len(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { op, expected, found });
    }
    Ok(())
}

/// `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    add_outer(&mut m, 1.0, u, v);
    m
}

/// `S += scale · u vᵀ` in place.
pub fn add_outer(s: &mut Matrix, scale: f64, u: &[f64], v: &[f64]) {
    debug_assert_eq!(s.rows, u.len());
    debug_assert_eq!(s.cols, v.len());
    let cols = s.cols;
    for (i, &ui) in u.iter().enumerate() {
        let c = scale * ui;
        if c == 0.0 {
            continue;
        }
        for (dst, &vj) in s.data[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *dst += c * vj;
        }
    }
}

/// `Sᵀ q`, the read-out of a `d_k x d_v` state.
pub fn matvec_t(s: &Matrix, q: &[f64]) -> Result<Vector> {
    check_len("matvec_t", s.rows, q.len())?;
    let mut out = vec![0.0; s.cols];
    for (i, &qi) in q.iter().enumerate() {
        if qi == 0.0 {
            continue;
        }
        for (o, &sij) in out.iter_mut().zip(s.row(i)) {
            *o += qi * sij;
        }
    }
    Ok(Vector(out))
}

/// `S x`.
pub fn matvec(s: &Matrix, x: &[f64]) -> Result<Vector> {
    check_len("matvec", s.cols, x.len())?;
    Ok(Vector((0..s.rows).map(|i| dot(s.row(i), x)).collect()))
}

/// `(I − k kᵀ) S`, evaluated as `S − k (kᵀ S)` without forming the reflector.
pub fn householder_apply(s: &Matrix, k: &[f64]) -> Result<Matrix> {
    check_len("householder_apply", s.rows, k.len())?;
    let proj = matvec_t(s, k)?;
    let mut out = s.clone();
    add_outer(&mut out, -1.0, k, &proj);
    Ok(out)
}

/// `Diag(α) S`.
pub fn diag_scale(alpha: &[f64], s: &Matrix) -> Result<Matrix> {
    check_len("diag_scale", s.rows, alpha.len())?;
    let mut out = s.clone();
    for (i, &a) in alpha.iter().enumerate() {
        for x in out.row_mut(i) {
            *x *= a;
        }
    }
    Ok(out)
}

/// `k / max(‖k‖₂, eps)`.
pub fn l2_normalize(k: &[f64], eps: f64) -> Vector {
    let n = math::sqrt(dot(k, k)).max(eps);
    Vector(k.iter().map(|x| x / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Silu,
    Softplus,
    Sqrt,
    Exp,
}

pub fn elementwise(kind: Activation, x: &[f64]) -> Result<Vector> {
    let f: fn(f64) -> f64 = match kind {
        Activation::Sigmoid => math::sigmoid,
        Activation::Silu => math::silu,
        Activation::Softplus => math::softplus,
        Activation::Exp => math::exp,
        Activation::Sqrt => {
            if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::NegativeEntry {
                    op: "sqrt",
                    index,
                    value,
                });
            }
            math::sqrt
        }
    };
    Ok(Vector(x.iter().map(|&v| f(v)).collect()))
}

pub fn sigmoid(x: f64) -> f64 {
    math::sigmoid(x)
}

pub fn silu(x: f64) -> f64 {
    math::silu(x)
}

pub fn logit(p: f64) -> f64 {
    math::logit(p)
}

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0, |m, (x, y)| {
        let d = (x - y).abs();
        if d.is_nan() {
            f64::INFINITY
        } else {
            m.max(d)
        }
    })
}

/// `c(m×n) += a(m×k) · b(k×n)`.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], ci);
        }
    }
}

/// `c(m×n) += a(m×k) · bᵀ` where `b` is `n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c(m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            axpy(api, bp, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Seeded ChaCha8 stream. The generator is counter-based and specified by
/// its seed alone, so streams are identical on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator for sub-stream `stream`: the first word of
    /// ChaCha stream `stream` under this seed becomes the child seed.
    pub fn split(&self, stream: u64) -> Rng {
        let mut s = ChaCha8Rng::seed_from_u64(self.seed);
        s.set_stream(stream);
        Rng::new(s.next_u64())
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vector(&mut self, len: usize) -> Vector {
        Vector::from_fn(len, |_| self.normal())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
