//! Named, derived random streams.
//!
//! Every source of randomness in a run descends from one `seed`. A stream is
//! identified by a name (`"data"`, `"augment"`, `"noise"`, `"init"`, ...) and
//! an optional index path, so the draws a component sees never depend on how
//! many draws some other component made before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of stream `name` at `path` under the global `seed`.
pub fn derive_seed(seed: u64, name: &str, path: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(name.as_bytes()));
    for &p in path {
        h = splitmix(h ^ splitmix(p));
    }
    h
}

pub fn stream(seed: u64, name: &str, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, path))
}
