//! Deterministic derivation of independent random streams.
//!
//! Every source of randomness in the framework is a pure function of a base
//! seed plus a path of labels and indices (e.g. `(seed, "client", round,
//! client_id)`). Streams are therefore stateless: reproducing any point of a
//! run needs only the base seed, never a shared mutable RNG. This is what
//! makes results independent of worker count and lets checkpoints resume
//! bitwise-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

// splitmix64 finalizer; stable across platforms and releases, unlike
// std's SipHash which is explicitly allowed to change.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builder for a stream id. Fold in labels and indices, then take either the
/// 64-bit seed or a ChaCha generator keyed by it.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix(seed ^ GAMMA))
    }

    pub fn label(mut self, s: &str) -> Self {
        for chunk in s.as_bytes().chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.0 = mix(self.0 ^ u64::from_le_bytes(buf).wrapping_add(GAMMA));
        }
        self.0 = mix(self.0 ^ s.len() as u64);
        self
    }

    pub fn index(mut self, i: u64) -> Self {
        self.0 = mix(self.0 ^ i.wrapping_add(GAMMA));
        self
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
