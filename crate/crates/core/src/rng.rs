//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a label path into a seed. Order matters; equal paths give equal seeds.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = splitmix(seed);
    for label in labels {
        for b in label.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        h = splitmix(h ^ 0xff);
    }
    h
}

/// Mixes integer coordinates (tree, round, step...) into a seed.
pub fn derive_seed_n(seed: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = derive_seed(seed, &[label]);
    for c in coords {
        h = splitmix(h ^ splitmix(*c));
    }
    h
}

pub fn substream(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}
