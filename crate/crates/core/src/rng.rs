//! Seeded random streams.
//!
//! Every run starts from one user seed. Components draw from named sub-streams
//! (`"data"`, `"jitter"`, `"mode"`, `"init"`, ...) so that adding draws in one
//! component never shifts the numbers another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Deterministic stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(mix(seed, name))
}

/// Stream keyed by a name and an extra index, e.g. one stream per sweep point.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix(
        mix(seed, name) ^ splitmix(index.wrapping_add(0x9e37_79b9)),
    ))
}

fn mix(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(seed ^ h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
