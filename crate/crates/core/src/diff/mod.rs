//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape is rebuilt every iteration (define-by-run). Node ids grow
//! monotonically and every node's parents have smaller ids, so a single
//! reverse scan over ids is a valid reverse-topological order.

pub mod gradcheck;
mod tape;

pub use tape::{GradientStore, Tape, Tensor};

use crate::error::{Error, Result};

/// Input floor for the guarded logarithm and its gradient.
pub const LOG_EPS: f64 = 1e-12;

/// Tape element type. f32 for training, f64 for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Strided `c = alpha * a . b + beta * c` over row-major buffers.
    ///
    /// `a` is m x k with strides (rsa, csa), `b` is k x n, `c` is m x n.
    /// Transposed operands are expressed by swapping strides, never by
    /// copying.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn max_linear_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    // Strides here are always positive (plain or transposed row-major views).
    let r = (rows as isize - 1).max(0) * rs;
    let c = (cols as isize - 1).max(0) * cs;
    (r + c) as usize
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }

            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sin(self) -> Self {
                self.sin()
            }
            #[inline]
            fn cos(self) -> Self {
                self.cos()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(max_linear_index(m, k, rsa, csa) < a.len());
                debug_assert!(max_linear_index(k, n, rsb, csb) < b.len());
                debug_assert!(max_linear_index(m, n, rsc, csc) < c.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Fixed 2D convolution kernel. Both dimensions must be odd so "same"
/// padding is symmetric. The kernel itself is never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<F> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<F>,
}

impl<F: Scalar> Kernel<F> {
    pub fn new(rows: usize, cols: usize, weights: Vec<F>) -> Result<Self> {
        if rows % 2 == 0 || cols % 2 == 0 {
            return Err(Error::EvenKernel { rows, cols });
        }
        if weights.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "kernel",
                lhs: vec![rows, cols],
                rhs: vec![weights.len()],
            });
        }
        Ok(Kernel {
            rows,
            cols,
            weights,
        })
    }

    pub fn identity() -> Self {
        Kernel {
            rows: 1,
            cols: 1,
            weights: vec![F::ONE],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.weights[r * self.cols + c]
    }

    pub fn convert<G: Scalar>(&self) -> Kernel<G> {
        Kernel {
            rows: self.rows,
            cols: self.cols,
            weights: self
                .weights
                .iter()
                .map(|&w| G::from_f64(w.to_f64()))
                .collect(),
        }
    }
}
