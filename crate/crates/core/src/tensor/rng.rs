//! Counter-based random streams.
//!
//! A stream is fully determined by its key: (global seed, purpose label,
//! index path). Nothing is shared between streams, so results do not depend
//! on the order in which streams are consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes. Stable across platforms and compiler versions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hierarchical key for a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey(u64);

impl RngKey {
    pub fn new(seed: u64) -> Self {
        RngKey(splitmix64(seed))
    }

    /// Child key for a named purpose ("mask", "dropout", ...).
    pub fn derive(self, label: &str) -> Self {
        RngKey(splitmix64(self.0 ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Child key for the `i`-th item under this key.
    pub fn index(self, i: u64) -> Self {
        RngKey(splitmix64(self.0.rotate_left(17) ^ splitmix64(i ^ GOLDEN)))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn stream(self) -> Rng {
        Rng(ChaCha8Rng::seed_from_u64(self.0))
    }
}

/// A reproducible random stream. Implements [`RngCore`] so the usual
/// `rand::Rng` helpers apply.
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    /// Shorthand for `RngKey::new(seed).derive(label).index(index).stream()`.
    pub fn keyed(seed: u64, label: &str, index: u64) -> Self {
        RngKey::new(seed).derive(label).index(index).stream()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}
