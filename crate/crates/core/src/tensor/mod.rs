//! Dense row-major tensors and the handful of operations the model needs.
//!
//! Every differentiable op comes as a forward function plus a
//! vector-Jacobian product (`*_vjp`). Layers chain these by hand; there is no
//! recorded graph. [`grad_check`] compares any such pair against central
//! finite differences.

mod grad_check;
mod ops;
mod param;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use grad_check::{grad_check, DiffFn};
pub use ops::{
    dropout, dropout_vjp, layer_norm, layer_norm_vjp, relu, relu_vjp, softmax, softmax_vjp,
    LayerNormCache,
};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::Rng;

/// Floating point element type. `f64` is the default everywhere; `f32` is
/// available for speed runs.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense real array with shape metadata, stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| F::of(rng.normal() * std)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::of(low + (high - low) * rng.uniform()))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    /// Rows of a matrix (the leading extent; 1 for a vector).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a matrix (the trailing extent).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: F) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: F, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> F {
        self.dot(self)
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.sub(other).max_abs()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Column sums of a matrix.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = Self::zeros(&[c]);
        for i in 0..self.rows() {
            for (o, &v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Adds a vector to every row.
    pub fn add_row_vector(&mut self, v: &Self) {
        let c = self.cols();
        debug_assert_eq!(v.numel(), c);
        for row in self.data.chunks_mut(c) {
            for (a, &b) in row.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Self {
        let r = self.rows();
        let mut out = Self::zeros(&[r, width]);
        for i in 0..r {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Writes `src` into columns `start..start + src.cols()`.
    pub fn set_cols(&mut self, start: usize, src: &Self) {
        let w = src.cols();
        for i in 0..self.rows() {
            self.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
        }
    }

    pub fn concat_cols(a: &Self, b: &Self) -> Self {
        let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
        debug_assert_eq!(r, b.rows());
        let mut out = Self::zeros(&[r, ca + cb]);
        out.set_cols(0, a);
        out.set_cols(ca, b);
        out
    }

    /// Copies the `nr×nc` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Self {
        let mut out = Self::zeros(&[nr, nc]);
        for i in 0..nr {
            out.row_mut(i)
                .copy_from_slice(&self.row(r0 + i)[c0..c0 + nc]);
        }
        out
    }

    /// Writes `src` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Self) {
        let nc = src.cols();
        for i in 0..src.rows() {
            self.row_mut(r0 + i)[c0..c0 + nc].copy_from_slice(src.row(i));
        }
    }

    /// Rows `r0..r0 + n` as a new matrix.
    pub fn rows_range(&self, r0: usize, n: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![n, c],
            data: self.data[r0 * c..(r0 + n) * c].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Self]) -> Self {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        for p in parts {
            debug_assert_eq!(p.cols(), c);
            data.extend_from_slice(&p.data);
        }
        let r = data.len().checked_div(c).unwrap_or(0);
        Self {
            shape: vec![r, c],
            data,
        }
    }

    /// The first `n` rows.
    pub fn take_rows(&self, n: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![n, c],
            data: self.data[..n * c].to_vec(),
        }
    }

    /// Checked matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(gemm(self, false, other, false))
    }
}

/// Unchecked product with optional transposition of either operand.
/// `ta`/`tb` select `aᵀ`/`bᵀ` through strides, without copying.
pub fn gemm<F: Real>(a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool) -> Tensor<F> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "gemm inner extent mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(
        m,
        k,
        n,
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        F::zero(),
        &mut out,
    );
    out
}

/// `c += aᵀ·b` style accumulation used by the weight gradients.
pub fn gemm_acc<F: Real>(a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool, c: &mut Tensor<F>) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "gemm inner extent mismatch");
    assert_eq!((c.rows(), c.cols()), (m, n), "gemm output shape mismatch");
    gemm_into(m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, F::one(), c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_into<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    rsa: isize,
    csa: isize,
    b: &[F],
    rsb: isize,
    csb: isize,
    beta: F,
    c: &mut Tensor<F>,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == F::zero() {
            c.fill(F::zero());
        }
        return;
    }
    let n_out = c.cols() as isize;
    // SAFETY: extents and strides were derived from the tensors' own shapes
    // above and `c` is a distinct, exclusively borrowed allocation.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.data_mut().as_mut_ptr(),
            n_out,
            1,
        );
    }
}

/// Vector-Jacobian product of `c = a·b`: returns `(dc·bᵀ, aᵀ·dc)`.
pub fn matmul_vjp<F: Real>(a: &Tensor<F>, b: &Tensor<F>, dc: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    (gemm(dc, false, b, true), gemm(a, true, dc, false))
}
