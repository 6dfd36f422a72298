//! Seeded randomness.
//!
//! All stochastic choices (weight init, corpus jitter, shuffles, trial
//! sampling) draw from ChaCha12 streams. Subsystems never share a stream:
//! each derives its own from the master seed and a label, so adding a
//! consumer in one place cannot shift the draws of another.

use rand::SeedableRng;

/// The one PRNG used throughout the crate.
pub type Prng = rand_chacha::ChaCha12Rng;

/// Derives an independent stream seed from a master seed and a label.
///
/// FNV-1a over the label bytes folded with the master seed, then a splitmix64
/// finalizer. Stable across platforms and releases, which the determinism
/// contract depends on.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

/// Stream for an epoch-scoped consumer, e.g. per-epoch batch shuffling.
pub fn epoch_rng(master: u64, label: &str, epoch: u32) -> Prng {
    Prng::seed_from_u64(splitmix64(derive_seed(master, label) ^ (epoch as u64)))
}

/// Stream for a label-scoped consumer.
pub fn stream(master: u64, label: &str) -> Prng {
    Prng::seed_from_u64(derive_seed(master, label))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
