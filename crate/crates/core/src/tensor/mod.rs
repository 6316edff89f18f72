//! Dense 4-D tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every signal in the codec (frames, motion fields, residuals, feature maps,
//! latents) is a [`Tensor`] laid out as `(batch, channel, height, width)` in
//! row-major order. Differentiable computation goes through a [`Tape`], which
//! records each op on [`Var`] handles and replays them in reverse on
//! [`Tape::backward`].
//!
//! The engine is generic over [`Real`] so the same network code runs in
//! `f32` for training/coding and in `f64` for finite-difference checks.

mod kernels;
mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

pub use tape::{Gradients, Tape, Var};

/// Shape or argument mismatch reported by a tensor op.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{op}: {detail}")]
pub struct ShapeError {
    pub op: &'static str,
    pub detail: String,
}

impl ShapeError {
    pub(crate) fn new(op: &'static str, detail: impl Into<String>) -> Self {
        Self {
            op,
            detail: detail.into(),
        }
    }
}

/// Floating point element type of a tensor.
pub trait Real:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major `c = beta * c + op(a) * op(b)` with `op(a)` of size `m x k`
    /// and `op(b)` of size `k x n`. A `*_t` flag means the operand is stored
    /// transposed (`k x m` for `a`, `n x k` for `b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> [isize; 6] {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    [
        rsa as isize,
        csa as isize,
        rsb as isize,
        csb as isize,
        n as isize,
        1,
    ]
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v *= beta);
                    return;
                }
                let [rsa, csa, rsb, csb, rsc, csc] = gemm_strides(m, k, n, a_t, b_t);
                // SAFETY: the length assertion above covers every index the
                // strides can reach for an m x k by k x n product.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `(batch, channel, height, width)` extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Immutable dense tensor. Cloning shares the element buffer.
#[derive(Clone)]
pub struct Tensor<R = f32> {
    shape: Shape,
    data: Arc<Vec<R>>,
}

impl<R: fmt::Debug> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

impl<R: Real> PartialEq for Tensor<R> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Shape, data: Vec<R>) -> Result<Self, ShapeError> {
        if data.len() != shape.numel() {
            return Err(ShapeError::new(
                "tensor",
                format!("{} elements do not fill shape {shape}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<R>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: Shape, value: R) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: R) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<R> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> R {
        self.data[self.index(n, c, y, x)]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self, ShapeError> {
        if shape.numel() != self.numel() {
            return Err(ShapeError::new(
                "reshape",
                format!("cannot view {} as {shape}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self, ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::new(
                "zip",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(Self::from_parts(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    /// Converts the element type; same-type casts share the buffer.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        if let Some(data) = (&self.data as &dyn std::any::Any).downcast_ref::<Arc<Vec<S>>>() {
            return Tensor {
                shape: self.shape,
                data: data.clone(),
            };
        }
        Tensor::from_parts(
            self.shape,
            self.data.iter().map(|v| S::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().fold(R::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch item `n` as its own `1 x C x H x W` tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let len = self.shape.c * self.shape.plane();
        Self::from_parts(
            Shape { n: 1, ..self.shape },
            self.data[n * len..(n + 1) * len].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self, ShapeError> {
        let first = items
            .first()
            .ok_or_else(|| ShapeError::new("stack", "no tensors"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if (Shape { n: 1, ..t.shape })
                != (Shape {
                    n: 1,
                    ..first.shape
                })
            {
                return Err(ShapeError::new(
                    "stack",
                    format!("{} vs {}", t.shape, first.shape),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(Shape { n, ..first.shape }, data))
    }
}

impl Tensor<f32> {
    /// Little-endian byte image of the elements (no shape header).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}
