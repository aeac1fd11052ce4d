//! Splittable, counter-based random streams.
//!
//! A stream is identified by `(root_seed, path)`. The identifier is folded
//! into a 256-bit ChaCha key, so distinct paths give unrelated keystreams and
//! identical identifiers replay bit-for-bit regardless of which thread asks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub root_seed: u64,
    pub path: Vec<u64>,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            path: Vec::new(),
        }
    }

    pub fn at(root_seed: u64, path: &[u64]) -> Self {
        Self {
            root_seed,
            path: path.to_vec(),
        }
    }

    /// Substream one level below this one.
    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self {
            root_seed: self.root_seed,
            path,
        }
    }

    fn key(&self) -> [u8; 32] {
        // Four lanes with different initial tweaks; the path length is mixed
        // in first so that [a] and [a, 0] never share a prefix state.
        let mut key = [0u8; 32];
        for (lane, chunk) in key.chunks_exact_mut(8).enumerate() {
            let mut h = splitmix(self.root_seed ^ splitmix(lane as u64 + 1));
            h = splitmix(h ^ (self.path.len() as u64).wrapping_mul(GOLDEN));
            for &p in &self.path {
                h = splitmix(h ^ splitmix(p));
            }
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng(ChaCha12Rng::from_seed(self.key()))
    }
}

impl std::fmt::Display for RandomStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{:?}", self.root_seed, self.path)
    }
}

/// Generator handed out by [`RandomStream::rng`].
pub struct StreamRng(ChaCha12Rng);

impl StreamRng {
    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Inverse-CDF draw from a probability vector.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        sample_index(probs, self.uniform())
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn inner(&mut self) -> &mut ChaCha12Rng {
        &mut self.0
    }
}

/// Smallest index whose cumulative mass exceeds `u`. Zero-mass entries are
/// never returned.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}
