//! Deterministic seeded RNG streams.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from
//! a root seed plus a list of tags (iteration, instance index, purpose).
//! Streams are independent of thread scheduling, so parallel work is
//! bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a root seed with stream tags into a single sub-seed.
pub fn substream_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = mix(seed);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

/// A ChaCha12 stream for (seed, tags). Same inputs, same stream.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(substream_seed(seed, tags))
}
