//! Named, splittable random streams.
//!
//! Every stochastic consumer (initialization, dropout, augmentation,
//! shuffling) derives its own [`Stream`] from the experiment seed by name
//! and index, so the values it draws do not depend on how many other
//! consumers ran before it or on which thread it runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A key identifying an independent random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream {
            key: splitmix64(seed ^ 0x6f63_7466_706e_0001),
        }
    }

    /// Child stream keyed by a name.
    pub fn named(&self, name: &str) -> Self {
        // FNV-1a over the name, then mixed with the parent key.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Stream {
            key: splitmix64(self.key ^ splitmix64(h)),
        }
    }

    /// Child stream keyed by an integer (epoch, record index, fold, ...).
    pub fn index(&self, i: u64) -> Self {
        Stream {
            key: splitmix64(self.key.rotate_left(17) ^ splitmix64(i.wrapping_add(0x5851_f42d))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut z = self.key;
        for chunk in seed.chunks_mut(8) {
            z = splitmix64(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
