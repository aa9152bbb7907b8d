use num_traits::Float;

/// Floating-point scalar the numerics engine is generic over.
///
/// `f64` is the scalar the shipped pipeline uses (gradient checks and the
/// checkpoint format are specified at 64-bit precision); `f32` is supported
/// for callers that can live with looser tolerances.
pub trait Scalar:
    Float
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Error function, used by the exact Gaussian-CDF form of GELU.
    fn erf(self) -> Self;

    /// Lossy conversion from `f64`; constants in generic code go through here.
    fn cast(v: f64) -> Self {
        Self::from(v).expect("f64 constant not representable")
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Standard normal CDF Phi(x) = (1 + erf(x / sqrt(2))) / 2.
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    half * (T::one() + (x / T::cast(std::f64::consts::SQRT_2)).erf())
}

/// Standard normal PDF phi(x) = exp(-x^2 / 2) / sqrt(2 pi).
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    let half = T::cast(0.5);
    let inv_sqrt_2pi = T::cast(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (-half * x * x).exp() * inv_sqrt_2pi
}
