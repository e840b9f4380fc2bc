//! Slow, direct reference implementations.
//!
//! Each function here recomputes a quantity from first principles with no
//! shared code path beyond basic types, so the fast implementations can be
//! checked against it. None of these are meant for production use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom3d::{iou, Box3D, IouKind, ScoredBox};
use crate::voxelizer::{BevMap, SparseVoxelGrid};

fn inside_bev(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    lx.abs() <= b.l / 2.0 && ly.abs() <= b.w / 2.0
}

fn bev_extent(b: &Box3D) -> [f64; 4] {
    let (s, c) = b.yaw.sin_cos();
    let ex = (b.l * c.abs() + b.w * s.abs()) / 2.0;
    let ey = (b.l * s.abs() + b.w * c.abs()) / 2.0;
    [b.cx - ex, b.cx + ex, b.cy - ey, b.cy + ey]
}

/// BEV IoU from jittered stratified sampling of the overlap of both boxes'
/// axis-aligned extents on an `n x n` grid.
pub fn monte_carlo_iou_bev(a: &Box3D, b: &Box3D, n: usize, seed: u64) -> f64 {
    let (ea, eb) = (bev_extent(a), bev_extent(b));
    let (x0, x1) = (ea[0].max(eb[0]), ea[1].min(eb[1]));
    let (y0, y1) = (ea[2].max(eb[2]), ea[3].min(eb[3]));
    let union_exact = |inter: f64| a.l * a.w + b.l * b.w - inter;
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let mut hits = 0u64;
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + rng.gen::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.gen::<f64>()) * dy;
            if inside_bev(a, x, y) && inside_bev(b, x, y) {
                hits += 1;
            }
        }
    }
    let inter = hits as f64 / (n * n) as f64 * (x1 - x0) * (y1 - y0);
    inter / union_exact(inter)
}

/// 3D IoU by stratified sampling on an `n x n x n` grid spanning the BEV
/// overlap and the union of both height slabs.
pub fn monte_carlo_iou_3d(a: &Box3D, b: &Box3D, n: usize, seed: u64) -> f64 {
    let (ea, eb) = (bev_extent(a), bev_extent(b));
    let (x0, x1) = (ea[0].max(eb[0]), ea[1].min(eb[1]));
    let (y0, y1) = (ea[2].max(eb[2]), ea[3].min(eb[3]));
    let (z0, z1) = ((a.cz - a.h / 2.0).min(b.cz - b.h / 2.0), (a.cz + a.h / 2.0).max(b.cz + b.h / 2.0));
    let in_slab = |bx: &Box3D, z: f64| (z - bx.cz).abs() <= bx.h / 2.0;
    if x0 >= x1 || y0 >= y1 || z0 >= z1 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = [(x1 - x0) / n as f64, (y1 - y0) / n as f64, (z1 - z0) / n as f64];
    let mut hits = 0u64;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = x0 + (i as f64 + rng.gen::<f64>()) * d[0];
                let y = y0 + (j as f64 + rng.gen::<f64>()) * d[1];
                let z = z0 + (k as f64 + rng.gen::<f64>()) * d[2];
                if in_slab(a, z) && in_slab(b, z) && inside_bev(a, x, y) && inside_bev(b, x, y) {
                    hits += 1;
                }
            }
        }
    }
    let inter = hits as f64 / (n * n * n) as f64 * (x1 - x0) * (y1 - y0) * (z1 - z0);
    inter / (a.l * a.w * a.h + b.l * b.w * b.h - inter)
}

fn cell_of_point(grid: &SparseVoxelGrid, p: [f64; 3]) -> [i64; 3] {
    let cfg = grid.config();
    let dims = grid.dims();
    std::array::from_fn(|a| {
        let size = cfg.voxel_size[a] * f64::from(grid.stride());
        let f = ((p[a] - cfg.range_min[a]) / size).floor();
        if f.is_nan() {
            0
        } else {
            (f as i64).clamp(0, i64::from(dims[a]) - 1)
        }
    })
}

/// Scans every voxel, keeps those within Manhattan distance `t` of the
/// query cell and returns the first `k` rows by (distance, di, dj, dk).
pub fn linear_scan_query(grid: &SparseVoxelGrid, p: [f64; 3], t: u32, k: usize) -> Vec<usize> {
    let c = cell_of_point(grid, p);
    let mut hits: Vec<(i64, [i64; 3], usize)> = grid
        .coords()
        .iter()
        .enumerate()
        .filter_map(|(row, v)| {
            let d = [i64::from(v.i) - c[0], i64::from(v.j) - c[1], i64::from(v.k) - c[2]];
            let m = d[0].abs() + d[1].abs() + d[2].abs();
            (m <= i64::from(t)).then_some((m, d, row))
        })
        .collect();
    hits.sort();
    hits.into_iter().take(k).map(|h| h.2).collect()
}

/// Euclidean neighbors of `p` among voxel centers, sorted by (distance, row).
pub fn naive_ball_query(grid: &SparseVoxelGrid, p: [f64; 3], radius: f64, k: usize) -> Vec<usize> {
    let cfg = grid.config();
    let mut hits: Vec<(f64, usize)> = Vec::new();
    for (row, v) in grid.coords().iter().enumerate() {
        let idx = [v.i, v.j, v.k];
        let d2: f64 = (0..3)
            .map(|a| {
                let size = cfg.voxel_size[a] * f64::from(grid.stride());
                let center = cfg.range_min[a] + (f64::from(idx[a]) + 0.5) * size;
                (center - p[a]).powi(2)
            })
            .sum();
        if d2 <= radius * radius {
            hits.push((d2.sqrt(), row));
        }
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    hits.into_iter().take(k).map(|h| h.1).collect()
}

/// Dense 3x3x3 convolution with zero padding 1 and ReLU.
///
/// `dense` is `[i][j][k][c]`; weights are `[c_out][c_in][3][3][3]`. Output
/// dims are `ceil(d / stride)` and output site `o` reads `stride * o + d - 1`.
pub fn dense_conv3d(
    dense: &[f32],
    dims: [u32; 3],
    c_in: usize,
    weights: &[f32],
    bias: &[f32],
    c_out: usize,
    stride: u32,
) -> (Vec<f32>, [u32; 3]) {
    let od = dims.map(|d| d.div_ceil(stride));
    let at = |i: i64, j: i64, k: i64, c: usize| -> f32 {
        if i < 0 || j < 0 || k < 0 || i >= i64::from(dims[0]) || j >= i64::from(dims[1]) || k >= i64::from(dims[2]) {
            return 0.0;
        }
        let lin = ((i as usize * dims[1] as usize + j as usize) * dims[2] as usize) + k as usize;
        dense[lin * c_in + c]
    };
    let mut out = Vec::with_capacity((od[0] * od[1] * od[2]) as usize * c_out);
    let s = i64::from(stride);
    for oi in 0..i64::from(od[0]) {
        for oj in 0..i64::from(od[1]) {
            for ok in 0..i64::from(od[2]) {
                for co in 0..c_out {
                    let mut acc = f64::from(bias[co]);
                    for ci in 0..c_in {
                        for a in 0..3 {
                            for b in 0..3 {
                                for c in 0..3 {
                                    let w = weights[(co * c_in + ci) * 27 + a * 9 + b * 3 + c];
                                    let x = at(oi * s + a as i64 - 1, oj * s + b as i64 - 1, ok * s + c as i64 - 1, ci);
                                    acc += f64::from(w) * f64::from(x);
                                }
                            }
                        }
                    }
                    out.push((acc as f32).max(0.0));
                }
            }
        }
    }
    (out, od)
}

/// Dense 3x3 2D convolution with zero padding 1 and ReLU, weights `[c_out][c_in][3][3]`.
pub fn dense_conv2d(input: &BevMap, weights: &[f32], bias: &[f32], c_out: usize, stride: usize) -> BevMap {
    let (nx, ny) = (input.nx.div_ceil(stride), input.ny.div_ceil(stride));
    let c_in = input.channels;
    let mut out = BevMap::zeros(nx, ny, c_out);
    for x in 0..nx {
        for y in 0..ny {
            for co in 0..c_out {
                let mut acc = f64::from(bias[co]);
                for ci in 0..c_in {
                    for a in 0..3 {
                        for b in 0..3 {
                            let ix = (x * stride + a) as i64 - 1;
                            let iy = (y * stride + b) as i64 - 1;
                            if ix < 0 || iy < 0 || ix >= input.nx as i64 || iy >= input.ny as i64 {
                                continue;
                            }
                            let w = weights[(co * c_in + ci) * 9 + a * 3 + b];
                            acc += f64::from(w) * f64::from(input.at(ix as usize, iy as usize, ci));
                        }
                    }
                }
                out.data[(x * ny + y) * c_out + co] = (acc as f32).max(0.0);
            }
        }
    }
    out
}

/// Average precision recomputed from scratch at every detection cutoff.
///
/// For each prefix of the score-sorted detections the matching is redone
/// greedily; the interpolated precision at recall `r` is the best precision
/// over prefixes reaching recall `r`, and the result is their mean.
pub fn reference_ap(dets: &[ScoredBox], gts: &[Box3D], threshold: f64, recall_points: &[f64], kind: IouKind) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut curve = Vec::new();
    for n in 1..=order.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0usize;
        for &d in &order[..n] {
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(&dets[d].bbox, gt, kind);
                if v >= threshold && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, g));
                }
            }
            if let Some((_, g)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / n as f64));
    }
    let total: f64 = recall_points
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    total / recall_points.len() as f64
}
