//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed and a fixed stream id, so adding draws in one place never shifts the
//! sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const BACKBONE_INIT: u64 = 1;
    pub const GSAM_INIT: u64 = 2;
    pub const CLASSIFIER_INIT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const GRADCHECK: u64 = 5;
    /// Per-epoch streams start here: shuffle = base + 2·epoch, augment = base + 2·epoch + 1.
    pub const EPOCH_BASE: u64 = 1 << 32;
    /// Per-sample synthetic image streams start here.
    pub const SAMPLE_BASE: u64 = 1 << 48;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
