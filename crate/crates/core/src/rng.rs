//! Seeded random streams.
//!
//! Every randomized component draws from a ChaCha8 generator keyed by the user
//! [`Seed`] and a fixed per-module stream id. ChaCha is counter based, so two
//! modules seeded identically never share a keystream as long as their stream
//! ids differ. Sub-streams (one per sample, per pass, ...) are derived by
//! mixing an index into the seed with SplitMix64 before keying.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

/// User-facing seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Seed(pub u64);

/// Stream ids, one per module.
pub mod stream {
    pub const SYNTHGEN: u64 = 1;
    pub const ATTENTION: u64 = 2;
    pub const CLICKSIM: u64 = 3;
    pub const TRAINER: u64 = 4;
    pub const VERIFY: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Generator for module `stream`.
    pub fn rng(self, stream: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }

    /// Child seed for the `index`-th independent unit of work.
    pub fn derive(self, index: u64) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(index)))
    }

    /// Deterministic uniform value in [0, 1) addressed by `(self, a, b, c)`.
    ///
    /// Used where per-pixel randomness must not depend on iteration order.
    pub fn hash_unit(self, a: u64, b: u64, c: u64) -> f64 {
        let h = splitmix64(splitmix64(splitmix64(self.0 ^ a) ^ b) ^ c);
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
}
