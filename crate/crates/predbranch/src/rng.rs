//! Labeled deterministic random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from the
//! single run seed plus a string label (e.g. `"synthdata/means/e"`). Streams
//! with different labels are independent, and the mapping is fixed, so results
//! do not depend on evaluation order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over the label bytes; stable across platforms.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A reproducible generator for `(seed, label)`.
pub(crate) fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}
