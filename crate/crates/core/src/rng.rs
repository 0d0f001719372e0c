//! Seeded random streams.
//!
//! Every random purpose draws from its own ChaCha8 stream keyed by the run
//! seed, so runs are reproducible across platforms and one purpose
//! consuming more randomness (say, one mode sampling from a smaller pool)
//! never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Population = 0,
    TestSet = 1,
    Prompt = 2,
    Sampling = 3,
    Latency = 4,
    Noise = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
