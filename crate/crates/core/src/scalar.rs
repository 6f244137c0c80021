//! Scalar abstraction for similarity scores and confidences.
//!
//! Selection and thresholding only need ordered addition, so they run over
//! `f32`, `f64` and exact rationals alike. Cosine similarity needs a square
//! root and is bound on [`num_traits::Float`] instead.

use std::fmt::Debug;

use num_rational::Rational64;
use num_traits::{FromPrimitive, Num};

pub trait Scalar: Num + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;

    /// Absolute slack used when pruning on accumulated sums of roughly
    /// `magnitude`. Zero for exact types.
    fn rounding_slack(magnitude: Self) -> Self;

    fn is_finite_value(self) -> bool;
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }

    fn rounding_slack(magnitude: Self) -> Self {
        (magnitude.abs() + 1.0) * 1e-12
    }

    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn rounding_slack(magnitude: Self) -> Self {
        (magnitude.abs() + 1.0) * 1e-5
    }

    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for Rational64 {
    fn to_f64(self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }

    fn rounding_slack(_magnitude: Self) -> Self {
        Rational64::from_integer(0)
    }

    fn is_finite_value(self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_converts() {
        let r = Rational64::new(3, 4);
        assert_eq!(r.to_f64(), 0.75);
        assert_eq!(Rational64::rounding_slack(r), Rational64::from_integer(0));
    }

    #[test]
    fn float_slack_positive() {
        assert!(f64::rounding_slack(0.0) > 0.0);
        assert!(f32::rounding_slack(8.0) > 0.0);
        assert!(!f64::NAN.is_finite_value());
    }
}
