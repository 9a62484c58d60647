use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Seeded generator. Identical seeds give identical streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a labelled sub-task; does not advance `self`.
    pub fn stream(&self, label: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(label.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }
}

/// Overwrites `m` with i.i.d. normal(0, stddev^2) draws, in row-major order.
pub fn gaussian_fill(m: &mut DenseMatrix, rng: &mut Rng, stddev: f64) -> Result<()> {
    if !(stddev > 0.0) || !stddev.is_finite() {
        return Err(Error::param(format!("stddev must be positive, got {stddev}")));
    }
    for v in m.data_mut() {
        *v = stddev * rng.normal();
    }
    Ok(())
}

/// Fresh `rows x cols` matrix of normal(0, stddev^2) draws.
pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng, stddev: f64) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(rows, cols);
    gaussian_fill(&mut m, rng, stddev)?;
    Ok(m)
}
