//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! `seed ^ domain` and positioned on a stream index, so workers can own
//! independent streams and training never shares a stream with evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain for training batches.
pub const TRAIN_DOMAIN: u64 = 0x5452_4149_4e5f_0001;
/// Domain for Monte-Carlo evaluation.
pub const EVAL_DOMAIN: u64 = 0x4556_414c_5f5f_0002;
/// Domain for channel files written by the CLI.
pub const CHANNEL_FILE_DOMAIN: u64 = 0x4348_414e_4e45_0003;
/// Domain for parameter initialization and anchor channels.
pub const INIT_DOMAIN: u64 = 0x494e_4954_5f5f_0004;

/// Generator for stream `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}
