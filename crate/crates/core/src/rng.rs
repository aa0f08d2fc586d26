//! Named, counter-addressed random streams.
//!
//! Every stochastic consumer (initialization, DropPath, data sampling,
//! synthetic noise) draws from its own stream derived from the run seed, the
//! stream name and an integer counter. A stream can therefore be recreated at
//! any iteration without replaying earlier draws, which makes checkpoint
//! resume bit-exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        self.stream_at(name, 0)
    }

    /// Stream `name` at position `counter`.
    pub fn stream_at(&self, name: &str, counter: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        // Each counter value owns a disjoint 2^32-word block of the stream.
        rng.set_word_pos((counter as u128) << 32);
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
