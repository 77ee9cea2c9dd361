//! Seeded random streams.
//!
//! [`RngStream`] wraps ChaCha8, whose output is specified independently of
//! platform and word size. Draws are generated in `f64` and then converted to
//! the requested scalar type so that `f32` and `f64` runs see the same
//! underlying sequence.
//!
//! # Gamma convention
//!
//! `Gamma(shape, rate)` throughout this crate has density
//! `rate^shape x^(shape-1) e^(-rate x) / Γ(shape)` and mean `shape / rate`.
//! Samples come from `rand_distr::Gamma` (Marsaglia–Tsang), which takes a
//! *scale*; we pass `1 / rate`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Tag recorded in checkpoints describing how Gamma parameters are read.
pub const GAMMA_CONVENTION: &str = "shape-rate";

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent stream derived from this stream's seed and `tag`.
    pub fn derive(&self, tag: u64) -> RngStream {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
        RngStream::new(mixed)
    }

    /// One draw from `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.inner);
    }

    /// `n` i.i.d. draws from `[lo, hi)`.
    pub fn uniform<T: Scalar>(&mut self, lo: f64, hi: f64, n: usize) -> Result<Tensor<T>> {
        ensure!(lo < hi, "uniform bounds require lo < hi, got [{lo}, {hi})");
        let data = (0..n)
            .map(|_| {
                // guard against rounding up to `hi`
                let v = lo + (hi - lo) * self.next_f64();
                T::lit(if v < hi { v } else { lo })
            })
            .collect();
        Ok(Tensor::from_vec(data))
    }

    /// `n` i.i.d. draws from `Gamma(shape, rate)` (mean `shape / rate`).
    pub fn gamma<T: Scalar>(&mut self, shape: f64, rate: f64, n: usize) -> Result<Tensor<T>> {
        ensure!(
            shape > 0.0 && rate > 0.0,
            "gamma parameters must be positive, got shape={shape}, rate={rate}"
        );
        let dist = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| crate::Error::contract(format!("gamma: {e}")))?;
        let data = (0..n)
            .map(|_| T::lit(dist.sample(&mut self.inner)))
            .collect();
        Ok(Tensor::from_vec(data))
    }

    pub fn normal<T: Scalar>(&mut self, mean: f64, std: f64, n: usize) -> Tensor<T> {
        Tensor::from_vec((0..n).map(|_| T::lit(mean + std * self.next_normal())).collect())
    }
}
