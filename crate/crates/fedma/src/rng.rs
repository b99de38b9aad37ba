//! Seeded random substreams. Every consumer of randomness in a run draws
//! from its own named stream so that switching one component on or off
//! leaves the others' draws unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sampling,
    Delays,
    Noise,
    Shuffles,
    Task,
    Probe,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Sampling => 1,
            Stream::Delays => 2,
            Stream::Noise => 3,
            Stream::Shuffles => 4,
            Stream::Task => 5,
            Stream::Probe => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}
