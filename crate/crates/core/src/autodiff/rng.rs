//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id)`. The ChaCha block function is
//! keyed by the seed and the stream id selects an independent nonce, so two
//! streams never share keystream blocks and a stream can be replayed exactly
//! on any platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

/// Stream id for dropout masks of one forward pass at one optimizer step.
///
/// The high bits carry a domain tag so mask streams never collide with the
/// streams used for initialization or data order.
pub fn pass_stream_id(step: usize, pass: usize) -> u64 {
    const DROPOUT_DOMAIN: u64 = 0xD5 << 56;
    debug_assert!(pass < 1 << 12);
    DROPOUT_DOMAIN | ((step as u64) << 12) | pass as u64
}

/// Inverted dropout mask: kept entries carry `1 / (1 - rate)`, dropped are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    shape: Vec<usize>,
    keep: Vec<bool>,
    rate: f64,
}

impl DropoutMask {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len() as f64
    }

    /// Multiplicative factors, ready to be applied elementwise.
    pub fn to_tensor(&self) -> Tensor {
        let scale = self.scale();
        let values = self
            .keep
            .iter()
            .map(|&k| if k { scale } else { 0.0 })
            .collect();
        Tensor::new(self.shape.clone(), values).expect("mask shape matches keep vector")
    }
}

/// Draws a mask whose entries are independently kept with probability `1 - rate`.
pub fn draw_mask(rng: &mut RngStream, shape: &[usize], rate: f64) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::DropoutRate(rate));
    }
    let n: usize = shape.iter().product();
    let keep = if rate == 0.0 {
        vec![true; n]
    } else {
        (0..n).map(|_| rng.uniform() >= rate).collect()
    };
    Ok(DropoutMask {
        shape: shape.to_vec(),
        keep,
        rate,
    })
}
