//! Per-trial generator derivation.
//!
//! Every trial owns a ChaCha stream selected by its index, so results do not
//! depend on how trials are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Generator for `trial` under `master_seed`. `domain` separates independent
/// uses of the same trial index (layouts, channels, symbols, noise).
pub fn trial_rng(master_seed: u64, domain: u64, trial: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(trial);
    rng
}

pub mod domain {
    pub const LAYOUT: u64 = 1;
    pub const CHANNEL: u64 = 2;
    pub const SYMBOLS: u64 = 3;
    pub const NOISE: u64 = 4;
}
