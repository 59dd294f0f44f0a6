//! Dense 5-axis tensors in `(n, c, t, h, w)` row-major layout and the
//! forward kernels every layer is built from.
//!
//! Shapes elsewhere in the literature are often written `h×w×t`; here the
//! temporal axis always precedes the spatial ones, so a `112×112×16` feature
//! map with 64 channels is `(1, 64, 16, 112, 112)`.

mod conv;
mod io;
mod norm;
mod ops;
mod pool;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, Index, IndexMut, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use conv::{
    conv3d, conv3d_backward, conv3d_output_shape, output_len, ConvGrads, ConvSpec, Dims3, Pad3,
};
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to};
pub use norm::{batchnorm3d, batchnorm3d_backward, BatchNormState, BnMode, BnSaved, BN_EPS, BN_MOMENTUM};
pub use ops::{
    concat_channels, global_avg_pool, linear, linear_backward, relu, slice_channels, softmax,
    softmax_rows,
};
pub use pool::{pool3d, pool3d_backward, PoolMode, PoolSpec};

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a · b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {
    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c (m×n) = a (m×k) · b (k×n)` with optional
/// transposes, accumulating into `c` when `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reachable with these strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `(n, c, t, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape([n, c, t, h, w])
    }

    /// A batch of `n` feature vectors of width `c`.
    pub fn vector(n: usize, c: usize) -> Self {
        Shape([n, c, 1, 1, 1])
    }

    pub fn scalar() -> Self {
        Shape([1; 5])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn t(&self) -> usize {
        self.0[2]
    }
    pub fn h(&self) -> usize {
        self.0[3]
    }
    pub fn w(&self) -> usize {
        self.0[4]
    }

    /// `(t, h, w)`.
    pub fn volume(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per `(t, h, w)` plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    /// Elements per batch entry.
    pub fn sample(&self) -> usize {
        self.0[1] * self.plane()
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.0[0] = n;
        self
    }

    pub fn with_c(mut self, c: usize) -> Self {
        self.0[1] = c;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.0 == [1; 5]
    }

    /// Index of `(n, c, t, h, w)` in row-major order.
    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, c, t, h, w] = self.0;
        (((idx[0] * c + idx[1]) * t + idx[2]) * h + idx[3]) * w + idx[4]
    }

    fn validate(&self) -> Result<()> {
        for (axis, &d) in self.0.iter().enumerate() {
            if d == 0 {
                return Err(Error::EmptyOutput {
                    op: "shape",
                    axis: crate::error::AXIS_NAMES[axis],
                    size: 0,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, t, h, w] = self.0;
        write!(f, "({n},{c},{t},{h},{w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense tensor. The 32-bit instantiation, [`Tensor5`], is the universal
/// value type; `Tensor<f64>` is used for gradient checking.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor5 = Tensor<f32>;

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::Contract {
                op: "tensor",
                msg: format!(
                    "data length {} does not match shape {shape} ({} elements)",
                    data.len(),
                    shape.numel()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, v: T) -> Self {
        shape.validate().expect("non-empty shape");
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    /// A batch of vectors, one row per batch entry.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::from_vec(Shape::vector(n, c), data)
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.random_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::Contract {
                op: "reshape",
                msg: format!("cannot reshape {} into {shape}", self.shape),
            });
        }
        shape.validate()?;
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Batch entry `i` as a slice of `c·t·h·w` elements.
    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.shape.sample();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Batch entries `[start, start + len)` as a new tensor.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.n() {
            return Err(Error::Contract {
                op: "narrow_batch",
                msg: format!("range {start}..{} out of batch {}", start + len, self.shape.n()),
            });
        }
        let s = self.shape.sample();
        Ok(Tensor {
            shape: self.shape.with_n(len),
            data: self.data[start * s..(start + len) * s].to_vec(),
        })
    }

    /// Stacks tensors with identical non-batch axes along the batch axis.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Contract {
            op: "stack_batch",
            msg: "no tensors".into(),
        })?;
        let mut n = 0;
        for p in parts {
            for axis in 1..5 {
                if p.shape.0[axis] != first.shape.0[axis] {
                    return Err(Error::dim("stack_batch", axis, first.shape.0[axis], p.shape.0[axis]));
                }
            }
            n += p.shape.n();
        }
        let mut data = Vec::with_capacity(n * first.shape.sample());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_n(n),
            data,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: T, other: &Tensor<T>, b: T) -> Self {
        assert_eq!(self.shape, other.shape, "axpby shape");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        }
    }

    /// Reverses the width axis.
    pub fn flip_w(&self) -> Self {
        let w = self.shape.w();
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    /// Crops `(t, h, w)` to `len` starting at `start` on each axis.
    pub fn crop(&self, start: [usize; 3], len: [usize; 3]) -> Result<Self> {
        let [n, c, t, h, w] = self.shape.0;
        for (i, (&s, &l)) in start.iter().zip(&len).enumerate() {
            let full = [t, h, w][i];
            if l == 0 || s + l > full {
                return Err(Error::dim("crop", i + 2, full, s + l));
            }
        }
        let shape = Shape::new(n, c, len[0], len[1], len[2]);
        let mut data = Vec::with_capacity(shape.numel());
        for ni in 0..n {
            for ci in 0..c {
                for ti in start[0]..start[0] + len[0] {
                    for hi in start[1]..start[1] + len[1] {
                        let o = self.shape.offset([ni, ci, ti, hi, start[2]]);
                        data.extend_from_slice(&self.data[o..o + len[2]]);
                    }
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Copies the listed frames (temporal indices, repeats allowed) into a
    /// new tensor in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self> {
        let [n, c, t, h, w] = self.shape.0;
        if let Some(&bad) = frames.iter().find(|&&f| f >= t) {
            return Err(Error::dim("select_frames", 2, t, bad + 1));
        }
        let shape = Shape::new(n, c, frames.len(), h, w);
        let plane = h * w;
        let mut data = Vec::with_capacity(shape.numel());
        for ni in 0..n {
            for ci in 0..c {
                for &f in frames {
                    let o = self.shape.offset([ni, ci, f, 0, 0]);
                    data.extend_from_slice(&self.data[o..o + plane]);
                }
            }
        }
        Tensor::from_vec(shape, data)
    }

    /// Little-endian bytes of the serialized form, used for checksums.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        io::write_tensor_to(&mut buf, self).expect("write to Vec");
        buf
    }
}

impl<T: Real> Index<[usize; 5]> for Tensor<T> {
    type Output = T;
    fn index(&self, idx: [usize; 5]) -> &T {
        &self.data[self.shape.offset(idx)]
    }
}

impl<T: Real> IndexMut<[usize; 5]> for Tensor<T> {
    fn index_mut(&mut self, idx: [usize; 5]) -> &mut T {
        let o = self.shape.offset(idx);
        &mut self.data[o]
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{} {:?}", self.shape, head)?;
        if self.data.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}
