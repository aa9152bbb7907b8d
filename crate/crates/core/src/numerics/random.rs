use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Tensor of i.i.d. Gaussian(0, std) draws via Box-Muller.
///
/// Samples are generated in `f64` and then cast, so a given RNG stream
/// yields the same sequence regardless of the target scalar type.
pub fn gaussian_tensor<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps ln finite
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        data.push(T::cast(z * std));
    }
    Tensor::from_vec(shape, data).expect("gaussian tensor shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_under_seed() {
        let a: Tensor<f64> =
            gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(7), vec![4, 5], 0.02);
        let b: Tensor<f64> =
            gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(7), vec![4, 5], 0.02);
        assert_eq!(a, b);
    }

    #[test]
    fn roughly_centered() {
        let t: Tensor<f64> =
            gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(1), vec![10_000], 1.0);
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / t.numel() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
