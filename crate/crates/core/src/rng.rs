//! Portable random streams.
//!
//! Every random draw in the crate comes from ChaCha20 (a 64-bit-counter
//! stream cipher generator, bit-identical on every platform). A run is
//! identified by a `u64` seed; independent consumers inside a run get
//! their own stream by calling [`stream`] with a distinct stream id. The
//! key is derived from the seed with `SeedableRng::seed_from_u64` and the
//! stream id is written into ChaCha's 64-bit nonce, so two streams of the
//! same seed never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type SnlRng = ChaCha20Rng;

/// Stream ids used by the library. Callers may use any other id for
/// their own purposes; ids below 64 are reserved.
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MINIBATCH: u64 = 4;
    pub const PROPOSAL: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const EVALUATION: u64 = 7;
    pub const MDN: u64 = 8;
}

/// Generator for `(seed, stream_id)`.
pub fn stream(seed: u64, stream_id: u64) -> SnlRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
