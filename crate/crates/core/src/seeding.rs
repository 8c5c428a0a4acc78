//! Deterministic random substreams.
//!
//! Every stochastic decision draws from a stream keyed by the run seed plus a
//! tuple of indices (identity and image index, iteration and batch slot, ...),
//! so results never depend on the order in which work happens to execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a seed and a key tuple into a single 64-bit stream seed.
pub fn stream_seed(seed: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn substream(seed: u64, key: &[u64]) -> Rng {
    Rng::seed_from_u64(stream_seed(seed, key))
}

/// Stream domains, used as the first key element so that e.g. the
/// augmentation stream of iteration 3 never aliases the sampler of epoch 3.
pub mod domain {
    pub const SYNTH_IDENTITY: u64 = 1;
    pub const SYNTH_IMAGE: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const VIEWS: u64 = 4;
    pub const INIT_ENCODER: u64 = 5;
    pub const INIT_PROJECTOR: u64 = 6;
    pub const INIT_CLASSIFIER: u64 = 7;
}
