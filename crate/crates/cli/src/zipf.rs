//! Bounded Zipfian key-index generator.
//!
//! Exact inverse-CDF sampling over a precomputed cumulative table of the
//! normalized weights `1/i^theta`, i = 1..n. Exactness keeps the test
//! oracle trivial; the table approach is bounded to n <= 10^7 (80 MB of
//! cumulative weights). `theta = 0` degenerates to uniform and skips the
//! table entirely.

use crate::rng::SplitMix64;
use anyhow::{bail, Result};

/// Largest key space the exact table covers.
pub const MAX_EXACT_N: u64 = 10_000_000;

pub enum Zipfian {
    Uniform { n: u64 },
    Exact { cdf: Vec<f64> },
}

impl Zipfian {
    /// `theta` in [0,1): 0 is uniform, values near 1 highly skewed.
    pub fn new(n: u64, theta: f64) -> Result<Zipfian> {
        if n == 0 {
            bail!("key space must be non-empty");
        }
        if !(0.0..1.0).contains(&theta) {
            bail!("theta must be in [0, 1), got {theta}");
        }
        if theta == 0.0 {
            return Ok(Zipfian::Uniform { n });
        }
        if n > MAX_EXACT_N {
            bail!("theta > 0 uses exact CDF inversion, bounded to {MAX_EXACT_N} records");
        }
        let mut cdf = Vec::with_capacity(n as usize);
        let mut cum = 0.0f64;
        for i in 1..=n {
            cum += 1.0 / (i as f64).powf(theta);
            cdf.push(cum);
        }
        let total = cum;
        for c in &mut cdf {
            *c /= total;
        }
        Ok(Zipfian::Exact { cdf })
    }

    /// Draws an index in [0, n); index 0 is the most popular.
    pub fn next(&self, rng: &mut SplitMix64) -> u64 {
        match self {
            Zipfian::Uniform { n } => rng.below(*n),
            Zipfian::Exact { cdf } => {
                let u = rng.next_f64();
                cdf.partition_point(|&c| c < u) as u64
            }
        }
    }

    pub fn n(&self) -> u64 {
        match self {
            Zipfian::Uniform { n } => *n,
            Zipfian::Exact { cdf } => cdf.len() as u64,
        }
    }
}
