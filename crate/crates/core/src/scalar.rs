//! Scalar abstraction for the numeric core.
//!
//! Training runs in f32; gradient checking runs the identical code in f64.
//! Everything numeric is generic over [`Scalar`], with concrete aliases
//! exported from the crate root.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for embedding an f64 literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal conversion")
    }

    fn from_f32c(x: f32) -> Self;

    fn to_f32c(self) -> f32;

    /// Total order including negative zero and without NaN surprises.
    /// Used by order-independent (sorted) summation.
    fn total_order(&self, other: &Self) -> Ordering;
}

impl Scalar for f32 {
    fn from_f32c(x: f32) -> Self {
        x
    }
    fn to_f32c(self) -> f32 {
        self
    }
    fn total_order(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

impl Scalar for f64 {
    fn from_f32c(x: f32) -> Self {
        x as f64
    }
    fn to_f32c(self) -> f32 {
        self as f32
    }
    fn total_order(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

/// Sums values in a canonical order (ascending total order), so the result
/// does not depend on the caller's element order. Attention reductions rely
/// on this to stay bit-identical under token permutations.
pub fn sum_sorted<S: Scalar>(values: &mut [S]) -> S {
    values.sort_unstable_by(|a, b| a.total_order(b));
    let mut acc = S::zero();
    for v in values.iter() {
        acc = acc + *v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_sorted_is_permutation_invariant() {
        // Values chosen so naive left-to-right sums differ between orders.
        let base: Vec<f32> = vec![1.0e8, 1.0, -1.0e8, 3.25, -7.5, 1e-3, 42.0, -0.125];
        let mut a = base.clone();
        let mut b = base.clone();
        b.reverse();
        b.swap(1, 4);
        assert_eq!(sum_sorted(&mut a).to_bits(), sum_sorted(&mut b).to_bits());
    }

    #[test]
    fn literal_roundtrip() {
        assert_eq!(<f64 as Scalar>::lit(0.25), 0.25);
        assert_eq!(<f32 as Scalar>::lit(0.25), 0.25f32);
    }
}
