//! Dense row-major tensors and the raw kernels the differentiation graph is built on.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor value.
///
/// Every dimension is at least one and `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "shape {shape:?} must have at least one dimension, all positive"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` rows; mostly useful in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| S::lit(v))).collect();
        Self::matrix(rows.len(), cols, data)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: invalid shape")
    }

    /// i.i.d. Gaussian entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("invalid normal parameters");
        Self::from_fn(shape, |_| S::lit(dist.sample(rng)))
    }

    /// i.i.d. entries uniform on `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(-bound, bound).expect("invalid uniform bound");
        Self::from_fn(shape, |_| S::lit(dist.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading axis (rows of a matrix).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// In-place `self += alpha * other` for equal shapes.
    pub fn axpy(&mut self, alpha: S, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Row permutation of a matrix: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rows(), "permutation length must match rows");
        let width = self.len() / self.rows();
        let mut data = Vec::with_capacity(self.len());
        for &p in perm {
            data.extend_from_slice(&self.data[p * width..(p + 1) * width]);
        }
        Self {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        panel_sum(&mut c[i * n..(i + 1) * n], arow.iter().enumerate().map(|(p, &av)| (av, &b[p * n..(p + 1) * n])));
    }
    c
}

/// Column panel width kept in registers by [`panel_sum`].
const PANEL: usize = 16;

/// `out = Σ coef · row` over `terms` in order, one column panel at a time so
/// the partial sums stay in registers. Each entry is accumulated in the same
/// order as a plain row-by-row update.
fn panel_sum<'a, S: Scalar, I>(out: &mut [S], terms: I)
where
    I: Iterator<Item = (S, &'a [S])> + Clone,
{
    let n = out.len();
    let full = n - n % PANEL;
    for j0 in (0..full).step_by(PANEL) {
        let mut acc = [S::zero(); PANEL];
        for (coef, row) in terms.clone() {
            for (x, &v) in acc.iter_mut().zip(&row[j0..j0 + PANEL]) {
                *x += coef * v;
            }
        }
        out[j0..j0 + PANEL].copy_from_slice(&acc);
    }
    if full < n {
        for (coef, row) in terms {
            for (x, &v) in out[full..].iter_mut().zip(&row[full..]) {
                *x += coef * v;
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    // Row-times-matrix form vectorizes over the output row; a dot-product loop does not.
    let mut bt = vec![S::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, m, k, n)
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for p in 0..k {
        panel_sum(&mut c[p * n..(p + 1) * n], (0..m).map(|i| (a[i * k + p], &b[i * n..(i + 1) * n])));
    }
    c
}

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// How an input of some shape is read while iterating a broadcast output.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    Identity,
    /// Input is a trailing block repeated: `in_index = out_index % len`.
    Cyclic(usize),
    General(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let in_len: usize = input.iter().product();
        if input == out {
            return BroadcastMap::Identity;
        }
        // Input equal to a suffix of the output (after dropping leading 1s).
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Cyclic(in_len.max(1));
        }
        let n = out.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, n - input.len())
            .chain(input.iter().copied())
            .collect();
        let mut in_strides = vec![0usize; n];
        let mut stride = 1;
        for i in (0..n).rev() {
            in_strides[i] = if padded[i] == 1 { 0 } else { stride };
            stride *= padded[i];
        }
        let out_len: usize = out.iter().product();
        let mut map = Vec::with_capacity(out_len);
        let mut idx = vec![0usize; n];
        for _ in 0..out_len {
            map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for ax in (0..n).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        BroadcastMap::General(map)
    }

    #[inline]
    pub(crate) fn index(&self, out_index: usize) -> usize {
        match self {
            BroadcastMap::Identity => out_index,
            BroadcastMap::Cyclic(len) => out_index % len,
            BroadcastMap::General(map) => map[out_index],
        }
    }
}
