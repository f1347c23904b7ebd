//! Seeded random streams and mergeable Monte Carlo accumulators.
//!
//! Work is split into fixed-size chunks; chunk `k` draws from ChaCha stream
//! `k` of the base seed. Results depend on `(seed, chunk_size)` only, never
//! on how many worker threads process the chunks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub seed: u64,
    pub chunk_size: usize,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            chunk_size: DEFAULT_CHUNK,
        }
    }

    pub fn with_chunk(seed: u64, chunk_size: usize) -> Self {
        Self {
            seed,
            chunk_size: chunk_size.max(1),
        }
    }

    /// Derived plan for an independent sub-experiment.
    pub fn fork(&self, tag: u64) -> Self {
        Self {
            seed: self
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5851_F42D),
            chunk_size: self.chunk_size,
        }
    }

    pub fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    /// Chunk ranges covering `0..n`.
    pub fn chunks(&self, n: usize) -> Vec<(u64, std::ops::Range<usize>)> {
        (0..n)
            .step_by(self.chunk_size)
            .enumerate()
            .map(|(k, start)| (k as u64, start..(start + self.chunk_size).min(n)))
            .collect()
    }

    /// Runs `f` on every chunk in parallel and returns results in chunk order.
    pub fn map_chunks<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&mut ChaCha8Rng, std::ops::Range<usize>) -> T + Sync,
    {
        self.chunks(n)
            .into_par_iter()
            .map(|(k, range)| {
                let mut rng = self.stream(k);
                f(&mut rng, range)
            })
            .collect()
    }
}

/// Running `(sum, sum of squares, count)` triple; merging is associative.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub sum: f64,
    pub sum_sq: f64,
    pub count: usize,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.sum += x;
        self.sum_sq += x * x;
        self.count += 1;
    }

    pub fn merge(mut self, other: Moments) -> Moments {
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.count += other.count;
        self
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Sample standard deviation over the square root of the count.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let mean = self.mean();
        let var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    pub fn estimate(&self) -> McEstimate {
        McEstimate {
            mean: self.mean(),
            std_error: self.std_error(),
            n: self.count,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    /// `|mean - target|` in units of the standard error (∞ if se = 0 and they differ).
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.std_error
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let plan = SeedPlan::with_chunk(42, 100);
        let run = || {
            plan.map_chunks(1000, |rng, r| r.map(|_| rng.random::<f64>()).sum::<f64>())
        };
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a, b);
    }

    #[test]
    fn moments_merge_matches_single_pass() {
        let xs = [1.0, 2.0, 4.0, 8.0, 3.0];
        let mut all = Moments::default();
        xs.iter().for_each(|x| all.push(*x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..2].iter().for_each(|x| a.push(*x));
        xs[2..].iter().for_each(|x| b.push(*x));
        let m = a.merge(b);
        assert_eq!(m.count, all.count);
        assert!((m.mean() - all.mean()).abs() < 1e-15);
        assert!((m.std_error() - all.std_error()).abs() < 1e-15);
    }
}
