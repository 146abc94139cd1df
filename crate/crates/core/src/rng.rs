//! Named, reproducible random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for the substream `name` of `seed`. Distinct names give
/// independent streams; the same `(seed, name)` always gives the same stream.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut key = [0u8; 32];
    let a = splitmix(seed ^ fnv1a(name.as_bytes()));
    let b = splitmix(a ^ 0x5851_f42d_4c95_7f2d);
    let c = splitmix(b);
    let d = splitmix(c);
    for (chunk, v) in key.chunks_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Substream `name` indexed by an integer, e.g. a tile or step number.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    substream(seed, &format!("{name}/{index}"))
}
