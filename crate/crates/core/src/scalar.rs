//! Floating-point abstraction shared by the model, solver and mixture layers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Euler-Mascheroni constant, the mean of a standard Gumbel shock.
    const EULER_GAMMA: Self;

    /// Converts an `f64` literal. Panics only if the target cannot represent finite values.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("scalar conversion from usize")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Bit pattern used as a memoization key.
    fn key_bits(self) -> u64;
}

impl Scalar for f64 {
    const EULER_GAMMA: Self = 0.577_215_664_901_532_9;

    fn key_bits(self) -> u64 {
        self.to_bits()
    }
}

impl Scalar for f32 {
    const EULER_GAMMA: Self = 0.577_215_7;

    fn key_bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

/// `ln Σ exp(z)` with max-shift. Returns the shift-free maximum for an empty slice as `-inf`.
pub fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Max-shifted softmax written into `out`.
pub fn softmax_into<T: Scalar>(z: &[T], out: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_overflow_safe() {
        let z = [1000.0_f64, 1000.0];
        assert!((log_sum_exp(&z) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let z32 = [200.0_f32, 200.0];
        assert!((log_sum_exp(&z32) - (200.0 + 2f32.ln())).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one() {
        let z = [-800.0_f64, 3.0, 0.5];
        let mut p = [0.0; 3];
        softmax_into(&z, &mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[0] >= 0.0);
    }
}
