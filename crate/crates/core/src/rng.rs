//! Deterministic per-trial random streams.
//!
//! Every trial owns an independent ChaCha8 stream selected by its index, so
//! results do not depend on how trials are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

/// Stream for trial `index` under `master_seed`.
pub fn trial_stream(master_seed: u64, index: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Derives an unrelated master seed for a labelled sub-study (sweep point, pilot run).
pub fn derive_seed(master_seed: u64, label: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = master_seed ^ label.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
