//! Counter-based random stream.
//!
//! Every draw is a pure function of `(seed, counter)`, so the full generator
//! state is two integers that round-trip through checkpoints unchanged.

use rand::RngCore;
use serde::{Deserialize, Serialize};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash an arbitrary byte string into a 64-bit seed component (FNV-1a, then mixed).
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Independent stream keyed by `tag`; does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::new(mix64(self.seed ^ mix64(tag.wrapping_add(GAMMA))))
    }

    /// Stream keyed by a string, used for per-item seeds (`hash(global_seed, id)`).
    pub fn derive_str(&self, tag: &str) -> RngState {
        self.derive(hash_bytes(tag.as_bytes()))
    }

    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        let z = self
            .seed
            .wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GAMMA));
        self.counter = self.counter.wrapping_add(1);
        mix64(z)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let v = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}
