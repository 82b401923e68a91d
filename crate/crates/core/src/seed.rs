//! Counter-based seed splitting.
//!
//! Every random draw in a run descends from one [`RunSeed`]. A child seed is
//! a pure function of its parent and a label (or counter), so work can be
//! split across threads in any order and still reproduce bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunSeed(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RunSeed {
    pub fn new(seed: u64) -> Self {
        RunSeed(seed)
    }

    /// Independent stream for a named purpose.
    pub fn stream(self, tag: &str) -> RunSeed {
        self.child(fnv1a(tag))
    }

    /// The `index`-th child of this seed.
    pub fn child(self, index: u64) -> RunSeed {
        RunSeed(splitmix64(self.0 ^ splitmix64(index)))
    }

    /// Child keyed by an arbitrary string such as a window id.
    pub fn keyed(self, key: &str) -> RunSeed {
        self.child(fnv1a(key) ^ 0x5851_f42d_4c95_7f2d)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
