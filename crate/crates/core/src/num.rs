//! Scalar abstraction for the numeric core.
//!
//! All model math is generic over [`Scalar`] so the same code runs in f32 or
//! f64. Tests and the CLI default to f64 (see the aliases at the crate root);
//! f32 is available for faster experimentation.

use ndarray::{LinalgScalar, NdFloat};
use rand::Rng;

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    NdFloat
    + LinalgScalar
    + std::iter::Sum
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
{
    /// Lossless-enough conversion from f64 (exact for f64, rounded for f32).
    fn from_f64(x: f64) -> Self;
    /// Widening conversion to f64 (exact for both f32 and f64).
    fn to_f64(self) -> f64;
    /// One standard-normal draw from `rng`.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One uniform draw from `[lo, hi)`.
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        standard_normal_f64(rng) as f32
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.gen_range(lo..hi)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        standard_normal_f64(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.gen_range(lo..hi)
    }
}

/// Box-Muller in f64 so f32 and f64 models consume the rng stream identically.
fn standard_normal_f64<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>();
        let v: f64 = rng.gen::<f64>();
        if u > f64::MIN_POSITIVE {
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}
