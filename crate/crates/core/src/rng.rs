// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic random streams.
//!
//! Every replicate owns a ChaCha8 key derived from `(seed, replicate)`;
//! stages and sub-tasks select distinct ChaCha stream ids under that key,
//! so results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded source of independent per-replicate, per-stage streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed {
    seed: u64,
}

impl StreamSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a child seed, e.g. one per study cell.
    pub fn child(&self, tag: u64) -> StreamSeed {
        StreamSeed::new(splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0xA5A5))))
    }

    /// Stream `stream` of replicate `replicate`.
    pub fn stream(&self, replicate: u64, stream: u64) -> StreamRng {
        let mut key = [0u8; 32];
        let mut state = self.seed ^ splitmix64(replicate);
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng
    }
}
