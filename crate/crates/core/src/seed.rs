//! Deterministic seed derivation and RNG construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lipcycle_grad::Mat;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with an index into an independent child seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Child seed for a named stream, so independent consumers never share draws.
pub fn stream_seed(base: u64, stream: &str) -> u64 {
    stream
        .bytes()
        .fold(splitmix64(base), |acc, b| splitmix64(acc ^ b as u64))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
