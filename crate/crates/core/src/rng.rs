//! Seeded, counter-based random streams.
//!
//! Every consumer (data generation, initialization, augmentation, Monte Carlo
//! probes) derives its own stream from `(seed, stream id)`, so results do not
//! depend on the order in which other consumers drew numbers.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
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

    /// Independent child stream keyed by `tag`; does not advance `self`.
    pub fn split(&self, tag: u64) -> Self {
        Self::new(
            self.seed,
            splitmix(self.stream ^ splitmix(tag.wrapping_add(0x9e37))),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi]`; returns `lo` for a degenerate range.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n.max(1))
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        if hi <= lo {
            return lo;
        }
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn random_normal<T: Element>(
    rng: &mut Rng,
    shape: &[usize],
    mean: f64,
    std: f64,
) -> Result<Tensor<T>> {
    if !(std >= 0.0) {
        return Err(Error::contract(format!(
            "normal std must be >= 0, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(mean + std * rng.normal())).collect();
    Tensor::from_vec(shape, data)
}

/// Direction drawn uniformly from the unit sphere in `R^dim`.
pub fn random_uniform_sphere<T: Element>(rng: &mut Rng, dim: usize) -> Result<Vec<T>> {
    if dim == 0 {
        return Err(Error::contract("sphere dimension must be >= 1"));
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Ok(v.into_iter().map(|x| T::of(x / norm)).collect());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat_exactly() {
        let mut a = Rng::new(7, 3);
        let mut b = Rng::new(7, 3);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut c = Rng::new(7, 4);
        assert_ne!(xs[0], c.next_u64());
    }

    #[test]
    fn split_is_independent_of_parent_progress() {
        let mut a = Rng::new(1, 0);
        let before = a.split(5).next_u64();
        a.next_u64();
        assert_eq!(before, a.split(5).next_u64());
        assert_ne!(a.split(5).next_u64(), a.split(6).next_u64());
    }

    #[test]
    fn zero_std_gives_constant_mean() {
        let t: Tensor<f64> = random_normal(&mut Rng::new(0, 0), &[4, 5], 1.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.5));
        assert!(random_normal::<f64>(&mut Rng::new(0, 0), &[2], 0.0, -1.0).is_err());
    }

    #[test]
    fn normal_moments_match_law_of_large_numbers() {
        let t: Tensor<f64> = random_normal(&mut Rng::new(11, 2), &[100_000], 0.3, 2.0).unwrap();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.3).abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() / 2.0 - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn sphere_samples_are_unit_norm() {
        let mut rng = Rng::new(3, 9);
        for dim in [1, 2, 17, 300] {
            let v: Vec<f64> = random_uniform_sphere(&mut rng, dim).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert!(random_uniform_sphere::<f64>(&mut rng, 0).is_err());
    }
}
