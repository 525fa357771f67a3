//! Counter-based random streams.
//!
//! Every random quantity in the pipeline is drawn from a [`StreamRng`] keyed by
//! a tuple of integers (seed, domain, and up to three indices). The generator
//! state is a key plus a counter; output `n` of a stream is
//! `splitmix64(key + n * GOLDEN)`, so a stream can be reconstructed anywhere
//! from its key alone. Parallel sampling over edges or samples therefore gives
//! the same numbers as a sequential loop.

use rand_core::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream domains. Keeping them distinct guarantees that, say, the travel-time
/// draw for edge (0, 1) never shares a stream with weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    TravelTime = 1,
    TravelTimeSeries = 2,
    Init = 3,
    Shuffle = 4,
    Synthetic = 5,
    Experiment = 6,
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64, domain: Domain, indices: [u64; 3]) -> Self {
        let mut key = mix64(seed ^ GOLDEN);
        key = mix64(key ^ (domain as u64).wrapping_mul(GOLDEN));
        for idx in indices {
            key = mix64(key.wrapping_add(GOLDEN) ^ idx);
        }
        Self { key, counter: 0 }
    }

    pub fn from_seed(seed: u64, domain: Domain) -> Self {
        Self::new(seed, domain, [0, 0, 0])
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
