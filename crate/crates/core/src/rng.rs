//! Seed derivation for reproducible, schedule-independent random streams.
//!
//! Every random stream in the pipeline is a ChaCha8 generator seeded from a
//! SHA-256 digest of the global seed and a list of labels, so the stream
//! for (seed, base id, augment index) does not depend on the order in which
//! work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// A label component mixed into a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Str(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::Int(v)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::Int(v as u64)
    }
}

pub fn derive_seed(seed: u64, parts: &[SeedPart<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"coordloc");
    hasher.update(seed.to_le_bytes());
    for part in parts {
        match part {
            SeedPart::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            SeedPart::Int(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn stream(seed: u64, parts: &[SeedPart<'_>]) -> StreamRng {
    ChaCha8Rng::from_seed(derive_seed(seed, parts))
}

/// Derives a 64-bit seed, for APIs that take a plain integer.
pub fn derive_u64(seed: u64, parts: &[SeedPart<'_>]) -> u64 {
    let bytes = derive_seed(seed, parts);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &["x".into(), 3u64.into()]).random();
        let b: u64 = stream(7, &["x".into(), 3u64.into()]).random();
        let c: u64 = stream(7, &["x".into(), 4u64.into()]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // string/int framing keeps "1" and 1 apart
        assert_ne!(derive_seed(0, &["1".into()]), derive_seed(0, &[1u64.into()]));
    }
}
