//! Seedable random streams threaded explicitly through every stochastic op.
//!
//! All draws happen in f64 and are converted at the use site, so a given
//! seed produces identical noise in the f32 production path and the f64
//! oracle path.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic random stream. Wraps ChaCha8 with helpers for the draws
/// the pipeline needs.
#[derive(Debug, Clone)]
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream derived from a base seed and a tag path.
    /// Identical (seed, tags) always yields the identical stream.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in tags {
            h ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(h << 6)
                .wrapping_add(h >> 2);
            h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
            h ^= h >> 27;
        }
        SeedStream::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// 0/1 keep-mask: each entry is 1 with probability `keep_p`.
    pub fn bernoulli_keep_mask(&mut self, n: usize, keep_p: f64) -> Vec<f64> {
        (0..n)
            .map(|_| if self.uniform() < keep_p { 1.0 } else { 0.0 })
            .collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Draws `k` distinct indices from [0, n) in ascending order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        let mut picked: Vec<usize> = pool.into_iter().take(k).collect();
        picked.sort_unstable();
        picked
    }

    /// Position within the ChaCha stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores a stream from a seed and a saved word position.
    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        SeedStream { rng }
    }
}
