//! Shared fixtures for the benchmarks.

use teamwork::tensor::gaussian;
use teamwork::{AdapterMode, DenseMatrix, Rng, TeamworkAdapter};

pub const TEAM_SIZES: [usize; 4] = [1, 2, 4, 8];

/// A square adapter of width `dim` with nonzero factors.
pub fn adapter(team_size: usize, dim: usize, rank: usize, seed: u64) -> TeamworkAdapter {
    let mut rng = Rng::new(seed);
    let weight = gaussian(dim, dim, &mut rng, 0.1).expect("positive dims");
    let mut adapter = TeamworkAdapter::init(weight, team_size, rank, AdapterMode::Teamwork, &mut rng).expect("valid adapter");
    for i in 0..team_size {
        *adapter.factor_b_mut(i) = gaussian(rank, dim, &mut rng, 0.1).expect("positive dims");
    }
    adapter
}

/// One `tokens x dim` matrix per teammate.
pub fn team_tokens(team_size: usize, tokens: usize, dim: usize, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = Rng::new(seed);
    (0..team_size)
        .map(|_| gaussian(tokens, dim, &mut rng, 1.0).expect("positive dims"))
        .collect()
}
