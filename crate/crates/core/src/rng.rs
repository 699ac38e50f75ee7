//! Deterministic random streams derived from the master seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent purposes that draw randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Subsample = 2,
    Partition = 3,
    SyntheticTrain = 4,
    SyntheticTest = 5,
    ClientShuffle = 6,
}

/// ChaCha stream keyed by `(master_seed, purpose)` with stream id `(client, round)`.
///
/// Distinct `(master_seed, purpose, client, round)` tuples never share a
/// keystream as long as `client` and `round` fit in 32 bits.
pub fn stream_rng(master_seed: u64, purpose: Stream, client: usize, round: usize) -> ChaCha8Rng {
    assert!(client <= u32::MAX as usize && round <= u32::MAX as usize);
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((client as u64) << 32) | round as u64);
    rng
}

/// A 64-bit seed for APIs that take a plain seed.
pub fn derive_seed(master_seed: u64, purpose: Stream) -> u64 {
    stream_rng(master_seed, purpose, 0, 0).next_u64()
}
