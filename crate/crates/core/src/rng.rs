//! Seed derivation. Every random component draws from its own named stream
//! derived from one root seed, so changing how one component consumes
//! randomness never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Mix a root seed with a stream name and any number of integer coordinates.
pub fn derive_seed(root: u64, name: &str, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(root ^ fnv1a(name)), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(root: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, &[]))
}

pub fn stream_at(root: u64, name: &str, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "walks").random();
        let b: u64 = stream(7, "walks").random();
        let c: u64 = stream(7, "init").random();
        let d: u64 = stream_at(7, "walks", &[1, 0]).random();
        let e: u64 = stream_at(7, "walks", &[0, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(d, e);
    }
}
