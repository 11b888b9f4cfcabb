//! Dense row-major tensors and the forward kernels shared by the
//! autodiff graph and the no-grad inference path.
//!
//! Every reduction accumulates in `f64` in ascending index order, so a
//! kernel's output depends only on its inputs, never on batch layout or
//! thread count.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by the normalizers.
pub const EPS_NORM: f64 = 1e-12;

/// Storage scalar. Production code runs in `f32`; gradient checks
/// instantiate the same code in `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product with `f64` accumulation in ascending index order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += x.as_f64() * y.as_f64();
    }
    acc
}

/// Euclidean norm with `f64` accumulation.
#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> f64 {
    dot(v, v).sqrt()
}

/// Pointwise nonlinearity used between encoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!("item() on shape {:?}", self.shape)))
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix (a vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn require_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.require_same_shape(other, what)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `C[i][j] = Σ_t A[i][t]·B[t][j]`, accumulated over ascending `t` in f64.
    /// Zero entries of `A` are skipped (sparse bag-of-words inputs).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, p) = self.require_matrix("matmul lhs")?;
        let (p2, n) = other.require_matrix("matmul rhs")?;
        if p != p2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions {m}x{p} · {p2}x{n} disagree"
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let a_row = &self.data[i * p..(i + 1) * p];
            for (t, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let a = a.as_f64();
                let b_row = &other.data[t * n..(t + 1) * n];
                for (s, &b) in acc.iter_mut().zip(b_row) {
                    *s += a * b.as_f64();
                }
            }
            out.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn activate(&self, act: Activation) -> Self {
        self.map(|v| act.apply(v))
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (m, n) = self.require_matrix("add_row")?;
        if bias.len() != n {
            return Err(Error::shape(format!(
                "add_row: bias length {} for {m}x{n} matrix",
                bias.len()
            )));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Self::matrix(m, n, out)
    }

    /// Subtracts `col[i]` from every entry of row `i`.
    pub fn sub_col(&self, col: &Self) -> Result<Self> {
        let (m, n) = self.require_matrix("sub_col")?;
        if col.len() != m {
            return Err(Error::shape(format!(
                "sub_col: column length {} for {m}x{n} matrix",
                col.len()
            )));
        }
        let mut out = self.data.clone();
        for (row, &c) in out.chunks_mut(n).zip(&col.data) {
            for v in row.iter_mut() {
                *v = *v - c;
            }
        }
        Self::matrix(m, n, out)
    }

    /// Diagonal of a square matrix, as a vector.
    pub fn diag(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("diag")?;
        if m != n {
            return Err(Error::shape(format!("diag of non-square {m}x{n}")));
        }
        Ok(Self::vector((0..n).map(|i| self.data[i * n + i]).collect()))
    }

    pub fn sum(&self) -> T {
        let mut acc = 0.0f64;
        for v in &self.data {
            acc += v.as_f64();
        }
        T::from_f64(acc)
    }

    pub fn mean(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::shape("mean of empty tensor"));
        }
        let mut acc = 0.0f64;
        for v in &self.data {
            acc += v.as_f64();
        }
        Ok(T::from_f64(acc / self.data.len() as f64))
    }

    /// Row-wise `x − logsumexp(x)` with max subtraction.
    pub fn log_softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("log_softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| T::from_f64(v.as_f64() - lse)));
        }
        Self::matrix(m, n, out)
    }

    /// Scales every row to unit Euclidean norm. Vectors count as one row.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let n = self.cols();
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(n.max(1)) {
            out.extend(l2_normalized(row)?);
        }
        Self::new(self.shape.clone(), out)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0f64;
    for v in row {
        acc += (v.as_f64() - max).exp();
    }
    max + acc.ln()
}

/// `v / ‖v‖`. Fails when `‖v‖ ≤ EPS_NORM`.
pub fn l2_normalized<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::Degenerate {
            norm: n,
            eps: EPS_NORM,
        });
    }
    Ok(v.iter().map(|&x| T::from_f64(x.as_f64() / n)).collect())
}

/// Vector form of [`Tensor::l2_normalize_rows`].
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::vector(l2_normalized(v.data())?))
}
