//! Dense complex tensors with explicit-axis contraction.
//!
//! A [`Tensor`] is a row-major block of [`C64`] values together with its
//! shape. Every contraction in the crate goes through [`contract`], which
//! lays the operands out as matrices and hands them to a complex GEMM. The
//! result of a contraction always lists the free axes of the left operand
//! first, followed by the free axes of the right operand.

mod io;
pub mod linalg;

pub use io::{read_binary, write_binary, TensorJson, BINARY_MAGIC};

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if volume(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                volume(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![ZERO; volume(shape)],
        }
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = ONE;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, &v) in values.iter().enumerate() {
            t.data[i * n + i] = C64::new(v, 0.0);
        }
        t
    }

    pub fn from_real(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&x| C64::new(x, 0.0)).collect(),
        )
    }

    /// Builds a tensor by evaluating `f` on every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        t
    }

    /// Entries with real and imaginary parts uniform in [-1, 1).
    pub fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for z in t.data.iter_mut() {
            *z = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        t
    }

    /// Real entries uniform in [-1, 1).
    pub fn random_real<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for z in t.data.iter_mut() {
            *z = C64::new(rng.random_range(-1.0..1.0), 0.0);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: C64) {
        let k = self.offset(idx);
        self.data[k] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if volume(shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_shape(mut self, shape: &[usize]) -> Result<Self> {
        if volume(shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Axis `k` of the result is axis `perm[k]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let rank = self.shape.len();
        assert_eq!(perm.len(), rank, "permutation length");
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return self.clone();
        }
        let old_strides = strides_of(&self.shape);
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());

        // Odometer over the new index with the innermost axis unrolled.
        let inner = new_shape[rank - 1];
        let inner_stride = src_strides[rank - 1];
        let outer = self.data.len() / inner;
        let mut idx = vec![0usize; rank - 1];
        let mut base = 0usize;
        for _ in 0..outer {
            let mut off = base;
            for _ in 0..inner {
                out.push(self.data[off]);
                off += inner_stride;
            }
            for k in (0..rank - 1).rev() {
                idx[k] += 1;
                base += src_strides[k];
                if idx[k] < new_shape[k] {
                    break;
                }
                base -= src_strides[k] * new_shape[k];
                idx[k] = 0;
            }
        }
        Self {
            shape: new_shape,
            data: out,
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn scale_real(&self, factor: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for z in self.data.iter_mut() {
            *z *= factor;
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `<self, other>` with `self` conjugated.
    pub fn inner(&self, other: &Tensor) -> C64 {
        assert_eq!(self.shape, other.shape, "inner product shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        self.scale_real(1.0 / n)
    }

    /// Multiplies every slice along `axis` by the matching weight.
    pub fn scale_axis(&self, axis: usize, weights: &[f64]) -> Self {
        assert_eq!(self.shape[axis], weights.len(), "axis weights");
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = self.clone();
        for (k, z) in out.data.iter_mut().enumerate() {
            *z *= weights[(k / inner) % n];
        }
        out
    }

    /// Applies a matrix to one axis in place of position:
    /// `out[.., i, ..] = sum_j m[i, j] self[.., j, ..]`.
    pub fn apply_matrix(&self, axis: usize, m: &Tensor) -> Result<Tensor> {
        if m.rank() != 2 || m.shape[1] != self.shape[axis] {
            return Err(Error::dim(format!(
                "matrix {:?} cannot act on axis {axis} of {:?}",
                m.shape, self.shape
            )));
        }
        let t = contract(m, self, &[(1, axis)])?;
        // Result axes: [new, others...]; move `new` back into place.
        let rank = self.rank();
        let mut perm = Vec::with_capacity(rank);
        for k in 0..rank {
            perm.push(match k.cmp(&axis) {
                std::cmp::Ordering::Less => k + 1,
                std::cmp::Ordering::Equal => 0,
                std::cmp::Ordering::Greater => k,
            });
        }
        Ok(t.permute(&perm))
    }

    // rank-2 helpers

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Conjugate transpose of a matrix.
    pub fn dagger(&self) -> Self {
        assert_eq!(self.rank(), 2, "dagger needs a matrix");
        self.permute(&[1, 0]).conj()
    }

    pub fn transpose(&self) -> Self {
        assert_eq!(self.rank(), 2, "transpose needs a matrix");
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim("matmul needs two matrices"));
        }
        contract(self, other, &[(1, 0)])
    }

    pub fn trace(&self) -> C64 {
        assert_eq!(self.rank(), 2);
        let n = self.shape[0].min(self.shape[1]);
        (0..n).map(|i| self.data[i * self.shape[1] + i]).sum()
    }

    /// Rows `0..n` of a matrix.
    pub fn take_rows(&self, n: usize) -> Self {
        assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        Self {
            shape: vec![n, cols],
            data: self.data[..n * cols].to_vec(),
        }
    }

    /// Columns `0..n` of a matrix.
    pub fn take_cols(&self, n: usize) -> Self {
        assert_eq!(self.rank(), 2);
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols..r * cols + n]);
        }
        Self {
            shape: vec![rows, n],
            data,
        }
    }

    /// Hermitian part `(m + m^†) / 2` of a square matrix.
    pub fn hermitian_part(&self) -> Self {
        let d = self.dagger();
        (self + &d).scale_real(0.5)
    }

    /// Largest entry of `|m - m^†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        (self - &self.dagger()).max_abs()
    }

    /// `max |self - other|`, panicking on shape mismatch.
    pub fn max_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Sets the global phase so that the entry of largest magnitude is real
    /// positive (ties go to the lowest index). Returns the applied phase.
    pub fn fix_phase(&mut self) -> C64 {
        let mut best = 0;
        let mut best_abs = -1.0;
        for (k, z) in self.data.iter().enumerate() {
            let a = z.norm();
            if a > best_abs * (1.0 + 1e-12) {
                best_abs = a;
                best = k;
            }
        }
        if best_abs <= 0.0 {
            return ONE;
        }
        let phase = self.data[best].conj() / best_abs;
        for z in self.data.iter_mut() {
            *z *= phase;
        }
        self.data[best] = C64::new(self.data[best].re, 0.0);
        phase
    }
}

impl Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "add shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "sub shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul<C64> for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: C64) -> Tensor {
        self.scale(rhs)
    }
}

/// How an operand is laid out as a matrix without copying.
pub(crate) enum Layout {
    RowMajor,
    Transposed,
}

/// Returns `t` as a `rows x cols` matrix whose rows run over `row_axes` and
/// columns over `col_axes`, permuting only when neither the natural nor the
/// transposed layout already matches.
fn as_matrix<'a>(
    t: &'a Tensor,
    row_axes: &[usize],
    col_axes: &[usize],
    scratch: &'a mut Option<Tensor>,
) -> (&'a [C64], Layout) {
    let natural = row_axes.iter().chain(col_axes).copied().eq(0..t.rank());
    if natural {
        return (&t.data, Layout::RowMajor);
    }
    let transposed = col_axes.iter().chain(row_axes).copied().eq(0..t.rank());
    if transposed {
        return (&t.data, Layout::Transposed);
    }
    let perm: Vec<usize> = row_axes.iter().chain(col_axes).copied().collect();
    *scratch = Some(t.permute(&perm));
    (&scratch.as_ref().unwrap().data, Layout::RowMajor)
}

/// Complex GEMM `c = a * b` for row-major `m x k` and `k x n` inputs.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[C64],
    la: Layout,
    b: &[C64],
    lb: Layout,
) -> Vec<C64> {
    let mut c = vec![ZERO; m * n];
    let (rsa, csa) = match la {
        Layout::RowMajor => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::RowMajor => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: Complex64 is repr(C) with (re, im) layout, identical to [f64; 2];
    // the slices cover m*k, k*n and m*n elements with the strides above.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            rsa,
            csa,
            b.as_ptr() as *const [f64; 2],
            rsb,
            csb,
            [0.0, 0.0],
            c.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
    c
}

/// Sums over the paired axes of `a` and `b`.
///
/// The result carries the unpaired axes of `a` in their original order,
/// followed by the unpaired axes of `b`.
pub fn contract(a: &Tensor, b: &Tensor, axis_pairs: &[(usize, usize)]) -> Result<Tensor> {
    let mut used_a = vec![false; a.rank()];
    let mut used_b = vec![false; b.rank()];
    for &(ia, ib) in axis_pairs {
        if ia >= a.rank() || ib >= b.rank() {
            return Err(Error::dim(format!(
                "axis pair ({ia}, {ib}) out of range for ranks {} and {}",
                a.rank(),
                b.rank()
            )));
        }
        if used_a[ia] || used_b[ib] {
            return Err(Error::dim(format!("axis pair ({ia}, {ib}) repeats an axis")));
        }
        if a.shape[ia] != b.shape[ib] {
            return Err(Error::dim(format!(
                "axis {ia} of a has extent {} but axis {ib} of b has extent {}",
                a.shape[ia], b.shape[ib]
            )));
        }
        used_a[ia] = true;
        used_b[ib] = true;
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|&k| !used_a[k]).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|&k| !used_b[k]).collect();
    let pair_a: Vec<usize> = axis_pairs.iter().map(|p| p.0).collect();
    let pair_b: Vec<usize> = axis_pairs.iter().map(|p| p.1).collect();

    let m: usize = free_a.iter().map(|&k| a.shape[k]).product();
    let n: usize = free_b.iter().map(|&k| b.shape[k]).product();
    let k: usize = pair_a.iter().map(|&ax| a.shape[ax]).product();

    let mut sa = None;
    let mut sb = None;
    let (da, la) = as_matrix(a, &free_a, &pair_a, &mut sa);
    let (db, lb) = as_matrix(b, &pair_b, &free_b, &mut sb);
    let data = gemm(m, k, n, da, la, db, lb);

    let shape: Vec<usize> = free_a
        .iter()
        .map(|&ax| a.shape[ax])
        .chain(free_b.iter().map(|&ax| b.shape[ax]))
        .collect();
    Ok(Tensor { shape, data })
}

/// Outer product; axes of `a` followed by axes of `b`.
pub fn outer(a: &Tensor, b: &Tensor) -> Tensor {
    contract(a, b, &[]).expect("outer product never mismatches")
}
