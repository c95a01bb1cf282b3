//! Seeded random streams.
//!
//! A `(master, stream)` pair selects one ChaCha8 keystream: the master seed
//! keys the cipher and the replicate index picks the stream number, so the
//! map is injective and independent of thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSeed {
    pub master: u64,
    pub stream: u64,
}

impl StreamSeed {
    pub fn rng(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        SimRng { inner: rng }
    }

    /// Derived sub-stream for an auxiliary purpose (e.g. the ζ half of a
    /// comparison). Distinct `salt` values give distinct masters.
    pub fn derive(&self, salt: u64) -> StreamSeed {
        StreamSeed {
            master: self.master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17),
            stream: self.stream,
        }
    }
}

pub fn seed_stream(master_seed: u64, replicate_index: u64) -> StreamSeed {
    StreamSeed {
        master: master_seed,
        stream: replicate_index,
    }
}

/// Random source used by every simulator.
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Exponential waiting time by inversion; `rate > 0`.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Uniform integer in `0..n`; `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}
