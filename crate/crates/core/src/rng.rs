//! Deterministic, splittable random streams.
//!
//! Every stochastic component draws from a [`SeedStream`] derived from the
//! run's master seed plus a stable label, so results never depend on the
//! order in which components happen to consume randomness. Child streams
//! are independent: reinitializing layer 3 never shifts the draws seen by
//! layer 4.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A point in a deterministic seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { state: splitmix64(seed) }
    }

    /// Derive an independent child stream from a stable label.
    pub fn child(&self, label: &str) -> SeedStream {
        let mut h = self.state;
        for &b in label.as_bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        SeedStream { state: splitmix64(h ^ 0x9e37_79b9_7f4a_7c15) }
    }

    /// Derive an independent child stream from an index (epoch, example, ...).
    pub fn child_idx(&self, idx: u64) -> SeedStream {
        SeedStream { state: splitmix64(self.state ^ splitmix64(idx.wrapping_add(0x1234_5678_9abc_def0))) }
    }

    /// Materialize the stream as a generator.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
