//! Minimal reverse-mode differentiable arrays.
//!
//! Values live in plain [`Array`]s. A forward pass records operations on a
//! [`Tape`]; each recorded value is addressed through a [`DiffArray`] handle.
//! Calling [`DiffArray::backward`] on a scalar walks the tape in reverse and
//! returns the accumulated [`Gradients`].
//!
//! Only the operations the pre-training pipeline needs are provided.
//! Broadcasting is limited to trailing dimensions: the right operand's shape
//! must be a suffix of the left operand's shape.

mod array;
pub mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_with, GradCheckRow};
pub use tape::{pool_bounds, BackwardFn, DiffArray, Gradients, Tape};

use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point element type usable on a tape (`f32` for training,
/// `f64` for gradient checks).
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float conversion")
    }

    /// `c += a · b` for strided row-major views (`rs*` row stride, `cs*`
    /// column stride), `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], rsa: usize, csa: usize, b: &[Self], rsb: usize, csb: usize, c: &mut [Self], rsc: usize);
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm view out of bounds");
    }
}

macro_rules! scalar_impl {
    ($t:ty, $f:ident) => {
        impl Scalar for $t {
            fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], rsa: usize, csa: usize, b: &[Self], rsb: usize, csb: usize, c: &mut [Self], rsc: usize) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, 1);
                // SAFETY: every view was bounds-checked above and `c` is exclusively borrowed.
                unsafe {
                    matrixmultiply::$f(
                        m, k, n, 1.0,
                        a.as_ptr(), rsa as isize, csa as isize,
                        b.as_ptr(), rsb as isize, csb as isize,
                        1.0, c.as_mut_ptr(), rsc as isize, 1,
                    );
                }
            }
        }
    };
}

scalar_impl!(f32, sgemm);
scalar_impl!(f64, dgemm);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T, E = NdiffError> = std::result::Result<T, E>;

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
