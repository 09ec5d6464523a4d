//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, tag, index)`, so results never depend on thread scheduling or on
//! how many workers process a batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive an independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Normal samples truncated to +/- 2 standard deviations.
pub fn trunc_normal(rng: &mut StreamRng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 {
            out.push(v * std);
        }
    }
    out
}

pub fn normal(rng: &mut StreamRng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| dist.sample(rng) * std).collect()
}

pub fn uniform(rng: &mut StreamRng, low: f64, high: f64, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(low..high)).collect()
}
