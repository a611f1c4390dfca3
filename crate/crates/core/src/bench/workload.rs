//! Per-client operation streams: Zipf-distributed lock ids and a
//! read/write mix, reproducible from the run seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{WorkloadMode, WorkloadSpec};
use crate::cql::Mode;

/// Exact inverse-CDF sampler over ranks `0..n` with weight `1/(k+1)^alpha`.
#[derive(Debug, Clone)]
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: usize, alpha: f64) -> Self {
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for k in 1..=n {
            acc += (k as f64).powf(-alpha);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self { cdf }
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    /// Maps `u` in `[0, 1)` to a rank.
    pub fn rank_of(&self, u: f64) -> usize {
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.rank_of(rng.random::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Op {
    pub lock: u32,
    pub mode: Mode,
    /// Bytes moved by each critical-section access.
    pub size: u64,
}

/// Deterministic stream for one client: the run seed selects the key, the
/// client id selects the ChaCha stream.
pub struct OpStream {
    rng: ChaCha8Rng,
    read_ratio: f64,
    mode: WorkloadMode,
    object_size: u64,
    large_size: u64,
    large_fraction: f64,
}

impl OpStream {
    pub fn new(spec: &WorkloadSpec, seed: u64, client: u16) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(client as u64 + 1);
        Self {
            rng,
            read_ratio: spec.read_ratio,
            mode: spec.mode,
            object_size: spec.object_size,
            large_size: spec.large_object_size,
            large_fraction: spec.large_fraction,
        }
    }

    pub fn next_op(&mut self, zipf: &Zipf) -> Op {
        let lock = zipf.sample(&mut self.rng) as u32;
        let mode = if self.rng.random_bool(self.read_ratio) {
            Mode::Shared
        } else {
            Mode::Exclusive
        };
        let size = match self.mode {
            WorkloadMode::Objectstore if self.rng.random_bool(self.large_fraction) => self.large_size,
            _ => self.object_size,
        };
        Op { lock, mode, size }
    }
}
