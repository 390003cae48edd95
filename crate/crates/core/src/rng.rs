//! Deterministic per-replication random streams.
//!
//! Every source of randomness in the workbench is a `RngStream` keyed by
//! `(base_seed, stream_id)`. Streams with distinct ids are independent, so
//! replications can run in any order or in parallel and still reproduce the
//! same tables bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A counter-based random stream. Same `(base_seed, stream_id)` gives an
/// identical draw sequence; distinct stream ids give independent streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    base_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(base_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(stream_id);
        RngStream {
            base_seed,
            stream_id,
            rng,
        }
    }

    /// Derive a sub-stream for an independent purpose (e.g. bootstrap
    /// replicate `k` inside replication `r`). The tag is folded into the
    /// stream id so derived streams never collide with replication streams.
    pub fn substream(&self, tag: u64) -> Self {
        // Replication ids occupy the low half of the id space; tags are
        // spread with a large odd multiplier.
        let id = self
            .stream_id
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag)
            .wrapping_add(1);
        RngStream::new(self.base_seed, id)
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Vector of i.i.d. N(0, 1) draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}
