//! Seeded random source.
//!
//! Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), whose output
//! stream is specified bit-for-bit and is identical on every platform. The
//! 64-bit seed is expanded to a 256-bit key with `SeedableRng::seed_from_u64`.
//! Normal draws use the ziggurat sampler of `rand_distr::StandardNormal`;
//! Bernoulli draws compare a 64-bit integer against a fixed threshold. The
//! generator state is fully described by `(seed, word_pos)`, which is what
//! checkpoints persist.

use rand::distr::{Bernoulli, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serializable position of a [`RandomSource`] in its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Deterministic random source. Single owner; never shared between threads.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(state.word_pos);
        RandomSource {
            seed: state.seed,
            inner,
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// I.i.d. normal draws with the given mean and standard deviation.
    pub fn gauss_sample(&mut self, mean: f64, sd: f64, shape: &[usize]) -> Result<Tensor> {
        if !(sd >= 0.0) || !sd.is_finite() || !mean.is_finite() {
            return Err(Error::arg(format!(
                "normal parameters must be finite with sd >= 0 (mean {mean}, sd {sd})"
            )));
        }
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| mean + sd * self.standard_normal())
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Tensor of independent {0, 1} draws, each 1 with probability `retain_prob`.
    pub fn bernoulli_mask(&mut self, retain_prob: f64, shape: &[usize]) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        self.fill_bernoulli(retain_prob, &mut data)?;
        Tensor::from_vec(shape, data)
    }

    pub(crate) fn fill_bernoulli(&mut self, retain_prob: f64, out: &mut [f64]) -> Result<()> {
        let dist = Bernoulli::new(retain_prob).map_err(|_| {
            Error::arg(format!("retain probability {retain_prob} outside [0, 1]"))
        })?;
        for v in out {
            *v = if dist.sample(&mut self.inner) { 1.0 } else { 0.0 };
        }
        Ok(())
    }
}
