//! Seed derivation. Every stochastic step draws from its own ChaCha8
//! stream keyed by `(seed, stream tag, index)`, which keeps parallel work
//! and resumed runs reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub(crate) mod streams {
    pub const BASE_SCENES: u64 = 1;
    pub const CAPTION_SCENES: u64 = 2;
    pub const TEST_SCENES: u64 = 3;
    pub const PARAM_INIT: u64 = 10;
    pub const TEACHER_BATCH: u64 = 20;
    pub const STUDENT_BASE_BATCH: u64 = 21;
    pub const STUDENT_CAPTION_BATCH: u64 = 22;
    pub const PROPOSAL_JITTER: u64 = 30;
    pub const ROI_SAMPLING: u64 = 31;
    pub const MASK_NOISE: u64 = 40;
    pub const DROPOUT: u64 = 41;
}
