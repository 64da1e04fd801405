//! Derived random streams.
//!
//! Every stochastic decision (parameter init, shuffling, per-sample
//! augmentation, decoder noise) draws from its own stream keyed by a base seed,
//! a label and integer tags. Skipping one consumer never shifts another, which
//! is what makes resume and configuration-equivalence runs bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(base: u64, label: &str, tags: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ fnv1a(label));
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t));
    }
    h
}

pub fn stream(base: u64, label: &str, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, label, tags))
}
