//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the selection, image and network code is generic over.
///
/// Implemented for `f32` and `f64`. Reference results are produced in `f64`;
/// `f32` is supported for cheaper inference experiments.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Absolute tolerance on probability-row sums.
    const ROW_SUM_TOLERANCE: f64;

    /// Floor applied to probabilities before taking a logarithm.
    const LOG_FLOOR: f64;

    /// Converts from `f64`, rounding to the nearest representable value.
    fn of(value: f64) -> Self;

    /// Widens to `f64`.
    fn widen(self) -> f64;
}

impl Scalar for f64 {
    const ROW_SUM_TOLERANCE: f64 = 1e-9;
    const LOG_FLOOR: f64 = 1e-12;

    #[inline(always)]
    fn of(value: f64) -> Self {
        value
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    // Single precision cannot resolve 1e-9 around 1.0.
    const ROW_SUM_TOLERANCE: f64 = 1e-5;
    const LOG_FLOOR: f64 = 1e-12;

    #[inline(always)]
    fn of(value: f64) -> Self {
        value as f32
    }

    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
}

/// Index of the first maximal element; `None` for an empty slice.
///
/// Ties resolve to the lowest index. NaN entries never win.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None if !v.is_nan() => best = Some((i, v)),
            Some((_, b)) if v > b => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|(i, _)| i)
}
