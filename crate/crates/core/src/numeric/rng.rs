//! Replayable random streams.
//!
//! A stream is ChaCha8 keyed by `seed` (expanded with `seed_from_u64`) with the
//! 64-bit ChaCha stream nonce set to `stream_id`. The keystream position is the
//! internal counter, so a stream is fully determined by `(seed, stream_id)` and
//! the number of words drawn so far. Distinct stream ids select disjoint
//! keystreams under the same key.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finaliser, used to derive child stream ids.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
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

    /// Fresh stream under the same seed whose id is derived from this stream's
    /// id and `tag`. Does not advance `self`.
    pub fn child(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream_id ^ mix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// Index drawn from a probability vector by inverse CDF.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform() * probs.iter().sum::<f64>();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack past the last positive entry
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Matrix of i.i.d. N(0, 1) draws, filled row-major.
pub fn standard_normal(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = standard_normal(&mut RngStream::new(7, 0), 4, 5);
        let b = standard_normal(&mut RngStream::new(7, 0), 4, 5);
        assert_eq!(a, b);
        let c = standard_normal(&mut RngStream::new(8, 0), 4, 5);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_within_clt_bounds() {
        let n = 100_000;
        let m = standard_normal(&mut RngStream::new(42, 3), n, 1);
        let mean = m.sum() / n as f64;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 10_000;
        let a = standard_normal(&mut RngStream::new(42, 1), n, 1);
        let b = standard_normal(&mut RngStream::new(42, 2), n, 1);
        let (ma, mb) = (a.sum() / n as f64, b.sum() / n as f64);
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        let rho = sab / (saa * sbb).sqrt();
        assert!(rho.abs() < 0.05, "rho {rho}");
    }

    #[test]
    fn child_streams_are_stable_and_distinct() {
        let parent = RngStream::new(5, 9);
        let mut a = parent.child(1);
        let mut b = parent.child(1);
        let mut c = parent.child(2);
        let xa = a.next_u64();
        assert_eq!(xa, b.next_u64());
        assert_ne!(xa, c.next_u64());
        assert_eq!(parent.counter(), 0);
    }

    #[test]
    fn categorical_follows_weights() {
        let mut rng = RngStream::new(1, 1);
        let probs = [0.0, 0.7, 0.0, 0.3];
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            counts[rng.categorical(&probs)] += 1;
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[2], 0);
        let f = counts[1] as f64 / 20_000.0;
        assert!((f - 0.7).abs() < 0.015, "{f}");
    }
}
