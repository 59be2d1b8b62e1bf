//! Counter-based random streams.
//!
//! Every random draw is keyed by `(seed, iteration, particle)`, so the value a
//! particle receives never depends on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream index used for the initial prior draw.
pub const INIT_STREAM: u64 = u64::MAX;
/// Stream index used for observation noise.
pub const DATA_STREAM: u64 = u64::MAX - 1;
/// Stream index used for randomized eigensolver probes.
pub const PROBE_STREAM: u64 = u64::MAX - 2;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, iteration, particle)` triple.
pub fn stream_rng(seed: u64, iteration: u64, particle: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [
        splitmix64(seed),
        splitmix64(seed ^ splitmix64(iteration)),
        splitmix64(iteration.rotate_left(17) ^ splitmix64(particle)),
        splitmix64(particle ^ 0xA076_1D64_78BD_642F),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(7, 3, 11).random();
        let b: u64 = stream_rng(7, 3, 11).random();
        let c: u64 = stream_rng(7, 3, 12).random();
        let d: u64 = stream_rng(7, 4, 11).random();
        let e: u64 = stream_rng(8, 3, 11).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_ne!(a, e);
    }
}
