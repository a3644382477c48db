//! Counter-addressed random streams.
//!
//! Every random draw in a run is addressed by `(seed, domain, index, counter)`
//! rather than pulled from a shared generator. Environment `b` at step `n`
//! therefore sees the same numbers whether it is simulated alone, inside a
//! batch of 64, or on another process, which is what makes batched, scalar
//! and data-parallel runs agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Distinct domains never share numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    EnvInit = 1,
    EnvCounter = 2,
    EnvNoise = 3,
    Action = 4,
    Shuffle = 5,
    Mixing = 6,
    Init = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, domain: Domain, index: u64, counter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((domain as u64) << 48) ^ index);
        rng.set_word_pos(u128::from(counter) << 24);
        rng
    }

    /// `n` standard normal draws from one stream position.
    pub fn normals(&self, domain: Domain, index: u64, counter: u64, n: usize) -> Vec<f32> {
        let mut rng = self.rng(domain, index, counter);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}
