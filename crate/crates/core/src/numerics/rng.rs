//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed and a 64-bit
//! stream id. Splitting derives a child stream id from the parent id and a
//! label, so the values a component draws never depend on how many values
//! another component drew first.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SeedRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Independent child stream; `split(a)` is the same no matter how many
    /// values were drawn from `self`.
    pub fn split(&self, label: u64) -> Self {
        Self::with_stream(self.seed, mix(self.stream ^ mix(label)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive dimensions")
    }

    /// Inverted dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
    pub fn dropout_mask<T: Scalar>(&mut self, len: usize, p: f64) -> Vec<T> {
        if p <= 0.0 {
            return vec![T::one(); len];
        }
        let keep = T::of(1.0 / (1.0 - p));
        (0..len)
            .map(|_| if self.uniform() < p { T::zero() } else { keep })
            .collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
