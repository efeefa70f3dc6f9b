//! Counter-based random streams.
//!
//! Every stochastic component in the crate draws from an [`RngStream`]
//! identified by a `(seed, stream id)` pair. Identical pairs produce
//! identical draw sequences, and substreams can be forked per worker or per
//! iteration without coordination. The generator is a ChaCha8 block cipher
//! counter, so stream state serializes as a single word position.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Deterministic random stream addressed by `(seed, stream id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// 64-bit finalizer used to derive substream ids.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Word position of the underlying counter; advances with every draw.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restore a stream to a previously observed counter position.
    pub fn with_counter(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = RngStream::new(seed, stream);
        s.rng.set_word_pos(counter);
        s
    }

    /// Fork a child stream. Children with distinct ids are independent of
    /// each other and of the parent's future draws.
    pub fn substream(&self, id: u64) -> Self {
        RngStream::new(self.seed, mix64(self.stream ^ mix64(id)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased-enough index draw in `[0, n)` via 128-bit multiply.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. The second variate of each pair is
    /// discarded so that stream state stays a plain counter.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal()).collect();
        Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
    }

    /// Sample `k` distinct indices from `[0, n)`; if `k >= n` returns all of
    /// them in shuffled order. Partial Fisher-Yates.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_pair_same_sequence() {
        let mut a = RngStream::new(17, 4);
        let mut b = RngStream::new(17, 4);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta = a.normal_tensor(&[3, 5]);
        let tb = b.normal_tensor(&[3, 5]);
        assert_eq!(ta, tb);
    }

    #[test]
    fn different_streams_differ() {
        let mut a = RngStream::new(17, 4);
        let mut b = RngStream::new(17, 5);
        let ta = a.normal_tensor(&[10]);
        let tb = b.normal_tensor(&[10]);
        assert_ne!(ta, tb);
    }

    #[test]
    fn counter_round_trip() {
        let mut a = RngStream::new(3, 9);
        for _ in 0..37 {
            a.next_u64();
        }
        let pos = a.counter();
        let mut b = RngStream::with_counter(3, 9, pos);
        for _ in 0..20 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let root = RngStream::new(11, 0);
        let mut c1 = root.substream(1);
        let mut c1_again = root.substream(1);
        let mut c2 = root.substream(2);
        let x = c1.next_u64();
        assert_eq!(x, c1_again.next_u64());
        assert_ne!(x, c2.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngStream::new(123, 7);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn index_in_range_and_uniformish() {
        let mut rng = RngStream::new(5, 5);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[rng.index(4)] += 1;
        }
        for &c in &counts {
            assert!((c as f64 - 2500.0).abs() < 200.0, "counts {counts:?}");
        }
    }
}
