//! Named, independent random streams derived from a single run seed.
//!
//! Each consumer draws from its own ChaCha stream so that enabling or
//! disabling one source of randomness never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    BatchSampling = 2,
    Augmentation = 3,
    Timestep = 4,
    DiffusionEps = 5,
    DpNoise = 6,
    Sampling = 7,
    Data = 8,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Stream for item `index` of a pure, index-addressable generator.
pub fn indexed(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// The per-run set of training streams.
#[derive(Clone, Debug)]
pub struct TrainStreams {
    pub batch: StreamRng,
    pub augment: StreamRng,
    pub timestep: StreamRng,
    pub eps: StreamRng,
    pub noise: StreamRng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            batch: stream(seed, Stream::BatchSampling),
            augment: stream(seed, Stream::Augmentation),
            timestep: stream(seed, Stream::Timestep),
            eps: stream(seed, Stream::DiffusionEps),
            noise: stream(seed, Stream::DpNoise),
        }
    }
}
