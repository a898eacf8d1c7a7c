//! Scalar abstraction: everything numeric in this crate is generic over
//! [`Scalar`], implemented for `f32` and `f64`.

use std::fmt;
use std::iter::Sum;

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar type for all vectors, matrices, and loss values.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + 'static
{
    /// Draw one standard normal variate from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Conversion from `f64` for literal constants (lossy for `f32`).
    fn cst(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Euclidean norm of a vector.
pub fn l2_norm<T: Scalar>(v: &Array1<T>) -> T {
    v.dot(v).sqrt()
}

/// Frobenius norm of a matrix.
pub fn frobenius_norm<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// True when every entry is finite.
pub fn all_finite<T: Scalar>(v: &Array1<T>) -> bool {
    v.iter().all(|e| e.is_finite())
}
