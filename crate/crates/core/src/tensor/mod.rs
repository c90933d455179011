//! Rank-4 NCHW tensors, forward kernels and a reverse-mode tape.
//!
//! Lower-rank data embeds with size-1 axes: a vector of length `k` is
//! `(1, 1, 1, k)`, a matrix `m x n` batched over `(N, C)` lives in `(H, W)`.

mod element;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod tape;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

pub use element::Element;
pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{ConvParams, PoolKind, PoolParams};
pub use ops::{ActivationKind, NormKind};
pub use tape::{BnStats, CustomOp, Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tape usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(
    Clone, Copy, PartialEq, Eq, Hash, Debug, Default, serde::Serialize, serde::Deserialize,
)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        let head: Vec<_> = self.data.iter().take(SHOW).collect();
        write!(f, "Tensor{}{:?}", self.shape, head)?;
        if self.data.len() > SHOW {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::dim(
                "from_vec",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds from `f64` values, converting to the element type.
    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Scalar value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(TensorError::dim(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Copy of channels `start..start + len`.
    pub fn channels(&self, start: usize, len: usize) -> Tensor<T> {
        let s = self.shape;
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor {
            shape: Shape::new(s.n, len, s.h, s.w),
            data: out,
        }
    }

    /// Copy of sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let s = self.shape;
        let len = s.c * s.plane();
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// Operation counts at batch 1 (or whatever batch the input shape holds).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopCount {
    /// 2 per multiply-accumulate in convolutions.
    pub conv: u64,
    pub matmul: u64,
    /// One per output element of norm, activation, pooling and elementwise ops.
    pub pointwise: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.matmul + self.pointwise
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }
}

impl std::ops::Add for FlopCount {
    type Output = FlopCount;
    fn add(self, o: FlopCount) -> FlopCount {
        FlopCount {
            conv: self.conv + o.conv,
            matmul: self.matmul + o.matmul,
            pointwise: self.pointwise + o.pointwise,
        }
    }
}

impl std::ops::AddAssign for FlopCount {
    fn add_assign(&mut self, o: FlopCount) {
        *self = *self + o;
    }
}

/// Stacks same-shaped samples along the batch axis.
pub fn stack<T: Element>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| TensorError::dim("stack", "no tensors"))?;
    let s = first.shape();
    let mut data = Vec::with_capacity(s.numel() * items.len());
    let mut n = 0;
    for t in items {
        let ts = t.shape();
        if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
            return Err(TensorError::dim("stack", format!("{ts} vs {s}")));
        }
        n += ts.n;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
}
