//! Seeded random streams.
//!
//! Every stage derives its generator from the run seed and a stage name so
//! that reruns reproduce bit-identical outputs, and per-scenario streams
//! make parallel simulation independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the named substream `name` of `seed`.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    splitmix(seed ^ splitmix(fnv1a(name.as_bytes())))
}

pub fn substream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(substream_seed(seed, name))
}

/// Generator for item `index` within a substream (counter-style).
pub fn indexed(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(substream_seed(seed, name));
    rng.set_stream(index);
    rng
}
