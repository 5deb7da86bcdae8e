//! Seeded random streams. One root seed, one ChaCha stream per replicate id,
//! so results do not depend on how replicates are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent stream `id` under the root `seed`.
pub fn stream(seed: u64, id: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream ids for distinct purposes under one root seed.
pub mod purpose {
    pub const TREES: u64 = 1 << 40;
    pub const CHAIN: u64 = 2 << 40;
    pub const FIXED_POINT: u64 = 3 << 40;
    pub const TUPLES: u64 = 4 << 40;
    pub const KERNEL_SAMPLE: u64 = 5 << 40;
    pub const STOPPING: u64 = 6 << 40;
    pub const SPLIT: u64 = 7 << 40;
    pub const DISINTEGRATION: u64 = 8 << 40;
}
