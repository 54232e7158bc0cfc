//! Counter-based random streams.
//!
//! A stream is identified by `(seed, stream id)` and positioned by a word
//! counter, so any draw can be replayed exactly. Independent substreams are
//! derived by hashing keys (frame index, token index, ...) into the stream id.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream positioned at an explicit word counter.
    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.rng.set_word_pos(counter);
        s
    }

    /// Independent child stream keyed by `keys`; does not advance `self`.
    pub fn substream(&self, keys: &[u64]) -> Self {
        let mut id = mix64(self.stream ^ 0x5eed_5eed_5eed_5eed);
        for &k in keys {
            id = mix64(id ^ mix64(k.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Self::with_stream(self.seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.rng.gen_range(lo..hi)
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform(0.0, 1.0) < p
    }

    /// I.i.d. standard normal tensor.
    pub fn gaussian<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

/// Free-function form of [`RngStream::gaussian`].
pub fn gaussian<T: Scalar>(rng: &mut RngStream, shape: &[usize]) -> Tensor<T> {
    rng.gaussian(shape)
}
