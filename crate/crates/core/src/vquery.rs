//! Voxel query: neighbor search by index translation under the Manhattan metric.
//!
//! A query point is quantized to a cell of the grid, then candidate offsets are
//! visited shell by shell (increasing Manhattan distance, lexicographic offset
//! within a shell) and looked up in the grid's hash index. Work is bounded by
//! the shell volume and `K`, independent of the number of occupied voxels.
//! [`ball_query_oracle`] is the brute-force Euclidean scan it replaces.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxelizer::{SparseVoxelGrid, VoxelCoord, VoxelizationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    /// Manhattan radius in grid cells.
    pub threshold: u32,
    pub max_neighbors: usize,
}

impl QuerySpec {
    pub fn new(threshold: u32, max_neighbors: usize) -> Result<Self> {
        let spec = QuerySpec {
            threshold,
            max_neighbors,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_neighbors == 0 {
            return Err(Error::InvalidConfig("max_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub row: usize,
    pub coord: VoxelCoord,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub neighbors: Vec<Neighbor>,
    /// Cell the query point quantized to (after clamping).
    pub center: VoxelCoord,
    /// The query point fell outside the grid and was clamped.
    pub clamped: bool,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbors.iter().map(|n| n.row)
    }
}

pub fn manhattan_distance(a: VoxelCoord, b: VoxelCoord) -> u32 {
    a.i.abs_diff(b.i) + a.j.abs_diff(b.j) + a.k.abs_diff(b.k)
}

/// All offsets within a Manhattan radius, sorted by (distance, di, dj, dk).
#[derive(Debug, Clone)]
pub struct OffsetTable {
    max_distance: u32,
    offsets: Vec<[i32; 3]>,
    distances: Vec<u32>,
    /// `shell_end[d]` is the number of offsets with distance <= d.
    shell_end: Vec<usize>,
    /// Table ranks in (di, dj, dk) order, for cache-friendly probing.
    memory_order: Vec<u32>,
}

impl OffsetTable {
    pub fn new(max_distance: u32) -> Self {
        let r = max_distance as i32;
        let mut entries: Vec<(u32, [i32; 3])> = Vec::new();
        for di in -r..=r {
            for dj in -r..=r {
                for dk in -r..=r {
                    let d = (di.abs() + dj.abs() + dk.abs()) as u32;
                    if d <= max_distance {
                        entries.push((d, [di, dj, dk]));
                    }
                }
            }
        }
        entries.sort();
        let mut shell_end = vec![0usize; max_distance as usize + 1];
        for (d, _) in &entries {
            shell_end[*d as usize] += 1;
        }
        for d in 1..shell_end.len() {
            shell_end[d] += shell_end[d - 1];
        }
        let mut memory_order: Vec<u32> = (0..entries.len() as u32).collect();
        memory_order.sort_by_key(|&r| entries[r as usize].1);
        OffsetTable {
            max_distance,
            memory_order,
            offsets: entries.iter().map(|e| e.1).collect(),
            distances: entries.iter().map(|e| e.0).collect(),
            shell_end,
        }
    }

    pub fn max_distance(&self) -> u32 {
        self.max_distance
    }

    /// Number of offsets with distance <= `d` (clamped to the table radius).
    pub fn count_within(&self, d: u32) -> usize {
        self.shell_end[d.min(self.max_distance) as usize]
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Quantizes a metric point to a grid cell, clamping into the grid dims.
pub fn quantize(grid: &SparseVoxelGrid, point: [f64; 3]) -> (VoxelCoord, bool) {
    let cfg = grid.config();
    let cell = grid.cell_size();
    let dims = grid.dims();
    let mut clamped = false;
    let idx: [u32; 3] = std::array::from_fn(|a| {
        let f = ((point[a] - cfg.range_min[a]) / cell[a]).floor();
        let max = f64::from(dims[a] - 1);
        if f.is_nan() {
            clamped = true;
            0
        } else if f < 0.0 {
            clamped = true;
            0
        } else if f > max {
            clamped = true;
            dims[a] - 1
        } else {
            f as u32
        }
    });
    (VoxelCoord::new(idx[0], idx[1], idx[2]), clamped)
}

/// Reusable voxel query with a precomputed offset table.
#[derive(Debug, Clone)]
pub struct VoxelQuery {
    table: OffsetTable,
}

impl VoxelQuery {
    pub fn new(max_threshold: u32) -> Self {
        VoxelQuery {
            table: OffsetTable::new(max_threshold),
        }
    }

    pub fn table(&self) -> &OffsetTable {
        &self.table
    }

    fn check(&self, spec: &QuerySpec) -> Result<()> {
        spec.validate()?;
        if spec.threshold > self.table.max_distance {
            return Err(Error::InvalidConfig(format!(
                "threshold {} exceeds the offset table radius {}",
                spec.threshold, self.table.max_distance
            )));
        }
        Ok(())
    }

    pub fn query(&self, grid: &SparseVoxelGrid, point: [f64; 3], spec: &QuerySpec) -> Result<NeighborSet> {
        self.check(spec)?;
        let (center, clamped) = quantize(grid, point);
        Ok(self.collect(grid, center, clamped, spec))
    }

    pub fn query_coord(&self, grid: &SparseVoxelGrid, center: VoxelCoord, spec: &QuerySpec) -> Result<NeighborSet> {
        self.check(spec)?;
        Ok(self.collect(grid, center, false, spec))
    }

    fn collect(&self, grid: &SparseVoxelGrid, center: VoxelCoord, clamped: bool, spec: &QuerySpec) -> NeighborSet {
        let dims = grid.dims();
        let end = self.table.count_within(spec.threshold) as u32;
        // probe in memory order, then restore (distance, offset) order by rank
        let mut hits: Vec<(u32, usize, VoxelCoord)> = Vec::new();
        for &rank in &self.table.memory_order {
            if rank >= end {
                continue;
            }
            let Some(coord) = center.offset(self.table.offsets[rank as usize], dims) else {
                continue;
            };
            if let Some(row) = grid.lookup(coord) {
                hits.push((rank, row, coord));
            }
        }
        hits.sort_unstable_by_key(|h| h.0);
        let neighbors = hits
            .into_iter()
            .take(spec.max_neighbors)
            .map(|(rank, row, coord)| Neighbor {
                row,
                coord,
                distance: self.table.distances[rank as usize],
            })
            .collect();
        NeighborSet {
            neighbors,
            center,
            clamped,
        }
    }

    /// One enumeration serving several thresholds; result `s` equals
    /// `query` with `thresholds[s]`. Thresholds must be increasing.
    pub fn query_multi(
        &self,
        grid: &SparseVoxelGrid,
        point: [f64; 3],
        thresholds: &[u32],
        max_neighbors: usize,
    ) -> Result<Vec<NeighborSet>> {
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "thresholds must be strictly increasing, got {thresholds:?}"
            )));
        }
        let Some(&largest) = thresholds.last() else {
            return Ok(Vec::new());
        };
        self.check(&QuerySpec {
            threshold: largest,
            max_neighbors,
        })?;
        let (center, clamped) = quantize(grid, point);
        let dims = grid.dims();
        let mut sets: Vec<Vec<Neighbor>> = vec![Vec::new(); thresholds.len()];
        let end = self.table.count_within(largest);
        for (off, &d) in self.table.offsets[..end].iter().zip(&self.table.distances[..end]) {
            // distances only grow, so a closed scale never reopens
            let open = thresholds
                .iter()
                .zip(&sets)
                .any(|(&t, s)| d <= t && s.len() < max_neighbors);
            if !open {
                break;
            }
            let Some(coord) = center.offset(*off, dims) else {
                continue;
            };
            if let Some(row) = grid.lookup(coord) {
                let n = Neighbor {
                    row,
                    coord,
                    distance: d,
                };
                for (set, &t) in sets.iter_mut().zip(thresholds) {
                    if d <= t && set.len() < max_neighbors {
                        set.push(n);
                    }
                }
            }
        }
        Ok(sets
            .into_iter()
            .map(|neighbors| NeighborSet {
                neighbors,
                center,
                clamped,
            })
            .collect())
    }
}

fn shared_query(threshold: u32) -> Option<&'static VoxelQuery> {
    static SHARED: OnceLock<VoxelQuery> = OnceLock::new();
    const SHARED_RADIUS: u32 = 8;
    (threshold <= SHARED_RADIUS).then(|| SHARED.get_or_init(|| VoxelQuery::new(SHARED_RADIUS)))
}

/// Voxel query around a metric point. Points outside the grid are clamped and flagged.
pub fn voxel_query(grid: &SparseVoxelGrid, point: [f64; 3], spec: &QuerySpec) -> Result<NeighborSet> {
    match shared_query(spec.threshold) {
        Some(q) => q.query(grid, point, spec),
        None => VoxelQuery::new(spec.threshold).query(grid, point, spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallNeighbor {
    pub row: usize,
    pub coord: VoxelCoord,
    pub distance: f64,
}

/// Brute-force ball query over every voxel center: first `k` hits within
/// `radius` in (distance, row) order.
pub fn ball_query_oracle(grid: &SparseVoxelGrid, point: [f64; 3], radius: f64, k: usize) -> Vec<BallNeighbor> {
    let cfg = grid.config();
    let cell = grid.cell_size();
    let r2 = radius * radius;
    let mut hits = Vec::new();
    for (row, c) in grid.coords().iter().enumerate() {
        let idx = c.as_array();
        let mut d2 = 0.0;
        for a in 0..3 {
            let center = cfg.range_min[a] + (f64::from(idx[a]) + 0.5) * cell[a];
            let diff = center - point[a];
            d2 += diff * diff;
        }
        if d2 <= r2 {
            hits.push(BallNeighbor {
                row,
                coord: *c,
                distance: d2.sqrt(),
            });
        }
    }
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.row.cmp(&b.row)));
    hits.truncate(k);
    hits
}

/// Random grid with `n` occupied cells in a cube sized for the given occupancy.
pub fn random_grid(n: usize, occupancy: f64, channels: usize, seed: u64) -> Result<SparseVoxelGrid> {
    let cells_needed = (n as f64 / occupancy).ceil().max(1.0);
    let side = cells_needed.cbrt().ceil().max(1.0) as u32;
    let cell = 0.1;
    let cfg = VoxelizationConfig {
        range_min: [0.0; 3],
        range_max: [f64::from(side) * cell; 3],
        voxel_size: [cell; 3],
        max_points_per_voxel: 1,
        max_voxels: n.max(1),
    };
    let total = (side as usize).pow(3);
    if n > total {
        return Err(Error::InvalidConfig(format!("{n} voxels do not fit in {total} cells")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as usize;
    let coords: Vec<VoxelCoord> = sample(&mut rng, total, n)
        .into_iter()
        .map(|lin| VoxelCoord::new((lin / (s * s)) as u32, ((lin / s) % s) as u32, (lin % s) as u32))
        .collect();
    let features = (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SparseVoxelGrid::new(cfg, 1, channels, coords, features)
}

/// One row of the query benchmark CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBenchRow {
    pub n_voxels: usize,
    pub method: String,
    pub k: usize,
    pub threshold_or_radius: f64,
    pub median_ns: f64,
    pub p95_ns: f64,
}

#[derive(Debug, Clone)]
pub struct QueryBenchConfig {
    pub spec: QuerySpec,
    pub queries: usize,
    pub occupancy: f64,
    pub seed: u64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(mut samples: Vec<f64>) -> (f64, f64) {
    samples.sort_by(f64::total_cmp);
    (percentile(&samples, 0.5), percentile(&samples, 0.95))
}

/// Times single queries of both methods at each grid size in `sweep`.
///
/// Each query is timed individually, after one untimed pass over the same
/// points so the voxel index is cache-resident.
pub fn bench_query(sweep: &[usize], cfg: &QueryBenchConfig) -> Result<Vec<QueryBenchRow>> {
    cfg.spec.validate()?;
    if sweep.iter().any(|&n| n == 0) {
        return Err(Error::InvalidConfig("sweep sizes must be >= 1".into()));
    }
    let vq = VoxelQuery::new(cfg.spec.threshold);
    let mut rows = Vec::new();
    for (idx, &n) in sweep.iter().enumerate() {
        let grid = random_grid(n, cfg.occupancy, 1, cfg.seed.wrapping_add(idx as u64))?;
        let radius = f64::from(cfg.spec.threshold) * grid.cell_size()[0];
        let hi = grid.config().range_max;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15 ^ n as u64);
        let points: Vec<[f64; 3]> = (0..cfg.queries)
            .map(|_| std::array::from_fn(|a| rng.gen_range(0.0..hi[a])))
            .collect();

        // warm caches and page in the index
        let mut sink = 0usize;
        for p in &points {
            sink += vq.query(&grid, *p, &cfg.spec)?.len();
        }
        for p in points.iter().take(16) {
            sink += ball_query_oracle(&grid, *p, radius, cfg.spec.max_neighbors).len();
        }

        // separate loops: a ball query sweeps every voxel and would evict
        // the voxel index between interleaved calls
        let mut vq_ns = Vec::with_capacity(points.len());
        for p in &points {
            let t = Instant::now();
            let r = vq.query(&grid, *p, &cfg.spec)?;
            vq_ns.push(t.elapsed().as_nanos() as f64);
            sink += r.len();
        }
        let mut ball_ns = Vec::with_capacity(points.len());
        for p in &points {
            let t = Instant::now();
            let b = ball_query_oracle(&grid, *p, radius, cfg.spec.max_neighbors);
            ball_ns.push(t.elapsed().as_nanos() as f64);
            sink += b.len();
        }
        std::hint::black_box(sink);

        let (median, p95) = summarize(vq_ns);
        rows.push(QueryBenchRow {
            n_voxels: n,
            method: "voxel_query".into(),
            k: cfg.spec.max_neighbors,
            threshold_or_radius: f64::from(cfg.spec.threshold),
            median_ns: median,
            p95_ns: p95,
        });
        let (median, p95) = summarize(ball_ns);
        rows.push(QueryBenchRow {
            n_voxels: n,
            method: "ball_query".into(),
            k: cfg.spec.max_neighbors,
            threshold_or_radius: radius,
            median_ns: median,
            p95_ns: p95,
        });
    }
    Ok(rows)
}

/// Writes rows as `n_voxels,method,k,threshold_or_radius,median_ns,p95_ns`.
pub fn write_bench_csv<W: Write>(rows: &[QueryBenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg(side: u32) -> VoxelizationConfig {
        VoxelizationConfig {
            range_min: [0.0; 3],
            range_max: [f64::from(side); 3],
            voxel_size: [1.0; 3],
            max_points_per_voxel: 1,
            max_voxels: 100_000,
        }
    }

    fn grid_of(side: u32, coords: &[[u32; 3]]) -> SparseVoxelGrid {
        let coords: Vec<VoxelCoord> = coords.iter().map(|c| VoxelCoord::new(c[0], c[1], c[2])).collect();
        let n = coords.len();
        SparseVoxelGrid::new(small_cfg(side), 1, 1, coords, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let o = VoxelCoord::new(0, 0, 0);
        assert_eq!(manhattan_distance(o, o), 0);
        assert_eq!(manhattan_distance(VoxelCoord::new(2, 3, 1), VoxelCoord::new(4, 1, 0)), 5);
    }

    #[test]
    fn offset_table_shells() {
        let t = OffsetTable::new(4);
        // octahedral numbers: 1, 7, 25, 63, 129
        assert_eq!((0..=4).map(|d| t.count_within(d)).collect::<Vec<_>>(), vec![1, 7, 25, 63, 129]);
        assert_eq!(t.offsets[0], [0, 0, 0]);
        assert_eq!(t.offsets[1], [-1, 0, 0]);
    }

    #[test]
    fn single_voxel_threshold_zero() {
        let g = grid_of(10, &[[3, 3, 3]]);
        let r = voxel_query(&g, [3.5, 3.5, 3.5], &QuerySpec::new(0, 4).unwrap()).unwrap();
        assert_eq!(r.neighbors.len(), 1);
        assert_eq!(r.neighbors[0].distance, 0);
        assert!(!r.clamped);
    }

    #[test]
    fn threshold_excludes_far_voxel() {
        let g = grid_of(12, &[[8, 5, 5], [6, 5, 5], [5, 5, 5]]);
        let r = voxel_query(&g, [5.5, 5.5, 5.5], &QuerySpec::new(2, 16).unwrap()).unwrap();
        let got: Vec<(VoxelCoord, u32)> = r.neighbors.iter().map(|n| (n.coord, n.distance)).collect();
        assert_eq!(got, vec![(VoxelCoord::new(5, 5, 5), 0), (VoxelCoord::new(6, 5, 5), 1)]);
    }

    #[test]
    fn outside_point_is_clamped() {
        let g = grid_of(10, &[[0, 0, 0]]);
        let r = voxel_query(&g, [-3.0, 0.5, 0.5], &QuerySpec::new(1, 4).unwrap()).unwrap();
        assert!(r.clamped);
        assert_eq!(r.center, VoxelCoord::new(0, 0, 0));
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn zero_k_rejected() {
        assert!(QuerySpec::new(2, 0).is_err());
    }

    #[test]
    fn matches_linear_scan_on_random_grids() {
        for seed in 0..10 {
            let g = random_grid(400, 0.1, 1, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let hi = g.config().range_max;
            for _ in 0..40 {
                let p: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..hi[a]));
                for t in [0, 1, 2, 4] {
                    for k in [1, 4, 16] {
                        let spec = QuerySpec::new(t, k).unwrap();
                        let got = voxel_query(&g, p, &spec).unwrap();
                        let want = oracle::linear_scan_query(&g, p, t, k);
                        assert_eq!(got.neighbors.iter().map(|n| n.row).collect::<Vec<_>>(), want);
                    }
                }
            }
        }
    }

    #[test]
    fn multi_scale_matches_separate_queries() {
        let g = random_grid(500, 0.08, 1, 7).unwrap();
        let q = VoxelQuery::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hi = g.config().range_max;
        for _ in 0..100 {
            let p: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..hi[a]));
            let multi = q.query_multi(&g, p, &[2, 4], 5).unwrap();
            assert_eq!(multi[0], q.query(&g, p, &QuerySpec::new(2, 5).unwrap()).unwrap());
            assert_eq!(multi[1], q.query(&g, p, &QuerySpec::new(4, 5).unwrap()).unwrap());
        }
        assert!(q.query_multi(&g, [0.0; 3], &[4, 2], 5).is_err());
    }

    #[test]
    fn ball_query_examples() {
        let g = grid_of(10, &[[1, 1, 1], [2, 1, 1], [9, 9, 9]]);
        let exact = ball_query_oracle(&g, g.center(0), 0.0, 16);
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].row, 0);
        let all = ball_query_oracle(&g, [0.0; 3], 100.0, 16);
        assert_eq!(all.len(), 3);
        assert_eq!(all.iter().map(|b| b.row).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn ball_query_matches_naive_double_loop() {
        for seed in 0..20 {
            let g = random_grid(300, 0.1, 1, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            let hi = g.config().range_max;
            let p: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..hi[a]));
            let radius = rng.gen_range(0.0..0.6);
            let got: Vec<usize> = ball_query_oracle(&g, p, radius, 8).iter().map(|b| b.row).collect();
            assert_eq!(got, oracle::naive_ball_query(&g, p, radius, 8));
        }
    }

    #[test]
    fn bench_csv_shape() {
        let cfg = QueryBenchConfig {
            spec: QuerySpec::new(2, 4).unwrap(),
            queries: 20,
            occupancy: 0.03,
            seed: 3,
        };
        let rows = bench_query(&[100, 200], &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n_voxels,method,k,threshold_or_radius,median_ns,p95_ns\n"));
        assert_eq!(text.lines().count(), 5);
        assert!(bench_query(&[0], &cfg).is_err());
    }

    proptest! {
        #[test]
        fn storage_order_independent(seed in 0u64..1000, rot in 0usize..300, t in 0u32..5, k in 1usize..20) {
            let g = random_grid(300, 0.1, 1, seed).unwrap();
            let n = g.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.rotate_left(rot % n);
            let coords = order.iter().map(|&r| g.coords()[r]).collect();
            let feats = order.iter().map(|&r| g.feature(r)[0]).collect();
            let g2 = SparseVoxelGrid::new(g.config().clone(), 1, 1, coords, feats).unwrap();
            let p = g.center(seed as usize % n);
            let a = voxel_query(&g, p, &QuerySpec::new(t, k).unwrap()).unwrap();
            let b = voxel_query(&g2, p, &QuerySpec::new(t, k).unwrap()).unwrap();
            let ca: Vec<_> = a.neighbors.iter().map(|x| (x.coord, x.distance)).collect();
            let cb: Vec<_> = b.neighbors.iter().map(|x| (x.coord, x.distance)).collect();
            prop_assert_eq!(ca, cb);
            for nb in &a.neighbors {
                prop_assert!(nb.distance <= t);
                prop_assert_eq!(manhattan_distance(nb.coord, a.center), nb.distance);
            }
        }
    }
}
