//! Counter-based random streams.
//!
//! A [`Rng`] is a ChaCha8 keystream addressed by `(seed, stream)`. Work that
//! runs in parallel takes one stream per item (frame, sample, clip) via
//! [`Rng::fork`], so results never depend on scheduling.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive child stream ids.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream, positioned at draw zero.
    pub fn fork(&self, child: u64) -> Rng {
        Rng::new(self.seed, mix64(self.stream ^ mix64(child.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi]` (the upper end is reachable only through rounding).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn randn<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(
            "randn",
            format!("shape extents must be >= 1, got {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.normal())).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_extent_is_an_error() {
        let mut rng = Rng::new(1, 0);
        assert!(randn::<f32>(&mut rng, &[3, 0]).is_err());
        assert!(randn::<f32>(&mut rng, &[]).is_err());
    }

    #[test]
    fn moments_of_a_million_draws() {
        let mut rng = Rng::new(7, 3);
        let t = randn::<f32>(&mut rng, &[1000, 1000]).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn same_seed_and_stream_is_bit_identical() {
        let a = randn::<f32>(&mut Rng::new(42, 9), &[64, 17]).unwrap();
        let b = randn::<f32>(&mut Rng::new(42, 9), &[64, 17]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_streams_are_uncorrelated() {
        let root = Rng::new(5, 0);
        let x = randn::<f64>(&mut root.fork(1), &[100_000]).unwrap();
        let y = randn::<f64>(&mut root.fork(2), &[100_000]).unwrap();
        let n = x.numel() as f64;
        let (mx, my) = (x.sum() / n, y.sum() / n);
        let cov: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / n;
        let sx = (x.data().iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.data().iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        let rho = cov / (sx * sy);
        assert!(rho.abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn forks_are_stable_and_distinct() {
        let root = Rng::new(11, 4);
        assert_eq!(root.fork(3).stream(), root.fork(3).stream());
        assert_ne!(root.fork(3).stream(), root.fork(4).stream());
        assert_ne!(root.fork(0).stream(), root.stream());
    }
}
