//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Every model computation runs through [`Tape`]: forward ops are recorded
//! with their local gradient rules, and one [`Tape::backward`] pass fills in
//! gradients for all `requires_grad` leaves. Parameters live in [`Tensor`]
//! values between steps and are registered as leaves on a fresh tape per
//! step. [`Adam`] applies updates; [`gradcheck`] provides the central
//! finite-difference oracle used by the test suites.

pub mod adam;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, CoordReport, GradCheckReport};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by tape operations and the optimizer.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite values produced by {op} (first at flat index {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("{0}")]
    Usage(String),
}

/// Scalar element type for tensors: f32 for parameters/activations in
/// production, f64 for the finite-difference oracle path.
pub trait Real:
    Copy
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// c = alpha * op(a) @ op(b) + beta * c, all buffers row-major.
    /// `a` is [m,k] (or [k,m] when `trans_a`), `b` is [k,n] (or [n,k] when
    /// `trans_b`), `c` is [m,n].
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path) => {
        impl Real for $ty {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $ty
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$ty>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$ty>::ln(self)
            }
            #[inline]
            fn ln_1p(self) -> Self {
                <$ty>::ln_1p(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$ty>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$ty>::abs(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                <$ty>::max(self, other)
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                <$ty>::min(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
                assert_eq!(c.len(), m * n, "gemm: out buffer size");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c.iter_mut() {
                        *v = beta * *v;
                    }
                    return;
                }
                let (rsa, csa) = if trans_a {
                    (1isize, m as isize)
                } else {
                    (k as isize, 1isize)
                };
                let (rsb, csb) = if trans_b {
                    (1isize, k as isize)
                } else {
                    (n as isize, 1isize)
                };
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Numerically stable softplus: log(1 + e^x).
#[inline]
pub(crate) fn softplus<E: Real>(x: E) -> E {
    if x > E::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
#[inline]
pub(crate) fn sigmoid<E: Real>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}
