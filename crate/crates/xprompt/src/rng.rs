//! Seeded randomness with named child streams.
//!
//! All randomness in the pipeline flows from one base seed. Components draw
//! from independent streams keyed by a stream name plus an index (epoch,
//! sentence, repetition, ...), so masking, initialization and shuffling can
//! each be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a child seed from a base seed, a stream name, and an index.
///
/// FNV-1a over the byte representation; stable across platforms and runs.
pub fn child_seed(base: u64, stream: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut hash = OFFSET;
    for byte in base
        .to_le_bytes()
        .iter()
        .chain(stream.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// A deterministic RNG for the given stream.
pub fn stream_rng(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(base, stream, index))
}
