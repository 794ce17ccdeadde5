//! Floating point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant. Panics only for values outside the type's range.
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Maps the value onto a signed integer line whose ordering matches the
    /// float ordering, so adjacent representable values differ by one.
    fn ordered_bits(self) -> i64;

    fn from_ordered_bits(bits: i64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn ordered_bits(self) -> i64 {
        let b = self.to_bits() as i32;
        let b = if b < 0 { i32::MIN - b } else { b };
        b as i64
    }

    fn from_ordered_bits(bits: i64) -> Self {
        let b = bits as i32;
        let b = if b < 0 { i32::MIN - b } else { b };
        f32::from_bits(b as u32)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn ordered_bits(self) -> i64 {
        let b = self.to_bits() as i64;
        if b < 0 {
            i64::MIN - b
        } else {
            b
        }
    }

    fn from_ordered_bits(bits: i64) -> Self {
        let b = if bits < 0 { i64::MIN - bits } else { bits };
        f64::from_bits(b as u64)
    }
}

/// Finds an addend `r` near `target - base` such that `base + r` rounds to
/// exactly `target`. Falls back to the plain difference when no such addend
/// exists within a few ulps.
pub fn exact_addend<S: Scalar>(base: S, target: S) -> S {
    let r = target - base;
    if base + r == target || !r.is_finite() {
        return r;
    }
    // base + r is monotone non-decreasing in r, so bisect on the ordered bit line.
    let slack = (base.abs().max(target.abs()) * S::epsilon() + S::min_positive_value()) * S::lit(4.0);
    let (mut lo, mut hi) = ((r - slack).ordered_bits(), (r + slack).ordered_bits());
    while lo <= hi {
        let mid = lo + (hi - lo) / 2;
        let cand = S::from_ordered_bits(mid);
        let sum = base + cand;
        if sum == target {
            return cand;
        }
        if sum < target {
            lo = mid + 1;
        } else {
            hi = mid - 1;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_bits_are_monotone() {
        let vals = [-3.5f64, -1e-300, -0.0, 0.0, 1e-300, 2.0, 1e10];
        for w in vals.windows(2) {
            assert!(w[0].ordered_bits() <= w[1].ordered_bits());
        }
        for v in vals {
            assert_eq!(f64::from_ordered_bits(v.ordered_bits()), v);
        }
        assert_eq!(1.0f32.ordered_bits() + 1, 1.0f32.next_up().ordered_bits());
        assert_eq!((-1.0f32).ordered_bits() + 1, (-1.0f32).next_up().ordered_bits());
    }

    #[test]
    fn exact_addend_hits_target() {
        // |target - base| no larger than |target|, where an exact addend exists
        let cases: [(f32, f32); 4] = [(1.0, 1.7), (0.3, 0.2999), (1234.5, 1234.6), (-2.0, -2.0e0 - 1e-3)];
        for (base, target) in cases {
            let r = exact_addend(base, target);
            assert_eq!(base + r, target, "base={base} target={target}");
        }
    }
}
