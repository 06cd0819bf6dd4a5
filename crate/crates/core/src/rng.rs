use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Seeded, counter-based random stream.
///
/// The same seed yields a bit-identical stream on every run of a build.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, derived from this stream's seed and `salt`.
    pub fn fork(&self, salt: u64) -> Self {
        Self::new(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sc(self.uniform(lo, hi))).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sc(std * self.normal())).collect();
        Tensor::new(shape, data).expect("valid shape")
    }
}

/// Fan-scaled uniform initialization in `±sqrt(6 / fan_in)`.
pub fn init_params<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> crate::Result<Tensor<T>> {
    if fan_in == 0 {
        return crate::error::invalid("fan_in must be >= 1");
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::<T>::zeros(shape)?;
    Ok(rng.uniform_tensor(shape, -bound, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = {
            let mut r = Rng::new(7);
            (0..100).map(|_| r.uniform(0.0, 1.0)).collect()
        };
        let b: Vec<f64> = {
            let mut r = Rng::new(7);
            (0..100).map(|_| r.uniform(0.0, 1.0)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let t: Tensor<f32> = init_params(&mut Rng::new(1), &[10, 10], 6).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let u: Tensor<f32> = init_params(&mut Rng::new(1), &[10, 10], 6).unwrap();
        assert_eq!(t, u);
        assert!(init_params::<f32>(&mut Rng::new(1), &[2], 0).is_err());
    }

    #[test]
    fn init_mean_near_zero() {
        let t: Tensor<f64> = init_params(&mut Rng::new(3), &[100_000], 6).unwrap();
        assert!(t.mean().abs() < 0.01, "mean {}", t.mean());
    }
}
