//! Splittable, counter-based random streams.
//!
//! Every consumer of randomness derives its own stream from a root seed and
//! a path of integer labels (`epoch`, `user index`, ...). Streams never share
//! state, so the values a user sees do not depend on evaluation order or on
//! how many threads run the work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A node in a tree of independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: u64,
}

/// Stream labels used across the crate. Keeping them in one place avoids
/// accidental reuse of a label for two unrelated purposes.
pub mod label {
    pub const INIT: u64 = 0x1;
    pub const SPLIT: u64 = 0x2;
    pub const SHUFFLE: u64 = 0x3;
    pub const SAMPLE: u64 = 0x4;
    pub const DROPOUT: u64 = 0x5;
    pub const VALIDATION: u64 = 0x6;
    pub const SYNTH: u64 = 0x7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree {
            key: splitmix64(seed),
        }
    }

    /// Child stream for `tag`. Distinct tags give unrelated streams.
    pub fn fork(self, tag: u64) -> Self {
        SeedTree {
            key: splitmix64(self.key ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Convenience for a path of tags.
    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |node, &t| node.fork(t))
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut k = self.key;
        for chunk in seed.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
