//! Fixtures shared by the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrk_core::params::Initializer;
use vrk_core::roipool::GroupedNeighbor;
use vrk_core::vquery::random_grid;
use vrk_core::{AggregatorWeights, SparseVoxelGrid};

/// A seeded aggregation workload: grid, weights and `m` groups of `k` neighbors.
pub struct AggCase {
    pub grid: SparseVoxelGrid,
    pub weights: AggregatorWeights,
    pub groups: Vec<Vec<GroupedNeighbor>>,
}

pub fn agg_case(n: usize, m: usize, k: usize, c: usize, c_out: usize, seed: u64) -> AggCase {
    let grid = random_grid(n, 0.03, c, seed).expect("grid parameters are valid");
    let weights = AggregatorWeights::init("bench", c, c_out, &mut Initializer::new(seed, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = (0..m)
        .map(|_| {
            (0..k)
                .map(|_| GroupedNeighbor {
                    row: rng.gen_range(0..n),
                    rel: std::array::from_fn(|_| rng.gen_range(-0.8..0.8)),
                })
                .collect()
        })
        .collect();
    AggCase { grid, weights, groups }
}

/// Uniform query points inside a grid's range.
pub fn query_points(grid: &SparseVoxelGrid, count: usize, seed: u64) -> Vec<[f64; 3]> {
    let hi = grid.config().range_max;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| std::array::from_fn(|a| rng.gen_range(0.0..hi[a]))).collect()
}
