use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Name recorded in checkpoints and manifests for the generator below.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Portable seeded generator (ChaCha8 keyed by the 64-bit seed).
///
/// The stream is identical on every platform. The full position can be
/// captured with [`SeededRng::state`] and restored with [`SeededRng::from_state`].
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent generator for a named sub-task.
    pub fn derive(&self, label: &str) -> SeededRng {
        // FNV-1a over the label, mixed with the parent seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        SeededRng::new(self.seed ^ h.rotate_left(17))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Index drawn in proportion to `weights`.
    pub fn weighted(&mut self, weights: &WeightedIndex<f64>) -> usize {
        self.inner.sample(weights)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `seed:word_pos` text form; the ChaCha stream id is always 0.
    pub fn state(&self) -> String {
        format!("{}:{}", self.seed, self.inner.get_word_pos())
    }

    pub fn from_state(state: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad rng state {state:?}"));
        let (seed, pos) = state.split_once(':').ok_or_else(bad)?;
        let seed: u64 = seed.parse().map_err(|_| bad())?;
        let pos: u128 = pos.parse().map_err(|_| bad())?;
        let mut rng = SeededRng::new(seed);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = SeededRng::new(7);
        for _ in 0..13 {
            a.uniform(0.0, 1.0);
        }
        let mut b = SeededRng::from_state(&a.state()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.uniform(0.0, 1.0).to_bits(), b.uniform(0.0, 1.0).to_bits());
        }
    }

    #[test]
    fn derived_streams_differ() {
        let base = SeededRng::new(1);
        let mut x = base.derive("shuffle");
        let mut y = base.derive("dropout");
        assert_ne!(x.uniform(0.0, 1.0), y.uniform(0.0, 1.0));
    }
}
