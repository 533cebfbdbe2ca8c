use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; `fork(k)` is stable for a given parent state.
    pub fn fork(&mut self, salt: u64) -> Rng {
        let s: u64 = self.inner.random();
        Rng::new(s ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| self.normal() * std)
    }

    pub fn uniform_tensor(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| lo + (hi - lo) * self.uniform())
    }

    /// `k` distinct indices from `0..n`, returned in ascending order.
    pub fn sample_sorted(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::Sampling(format!(
                "cannot sample {k} items without replacement from {n}"
            )));
        }
        let mut picked = index::sample(&mut self.inner, n, k).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
