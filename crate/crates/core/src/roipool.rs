//! Voxel RoI pooling and the detect head.
//!
//! Each RoI is split into `G x G x G` sub-voxels whose centers are the grid
//! points. For every grid point, stage and Manhattan scale, neighbors come
//! from a voxel query and are aggregated by a shared linear layer + ReLU
//! followed by a channel-wise max over neighbors.
//!
//! The linear layer acts on `[feature ; relcoord]`, so its weight splits as
//! `W = [W_F | W_C]` and `W [f; c] = W_F f + W_C c`. The accelerated path
//! applies `W_F` once per voxel before grouping and only `W_C` per neighbor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::Box3D;
use crate::params::{relu, sigmoid, DenseLayer, Initializer, ParamBundle, Tensor, TensorLookup};
use crate::voxelizer::SparseVoxelGrid;
use crate::vquery::VoxelQuery;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiPoolConfig {
    pub grid_size: usize,
    /// Manhattan thresholds per stage, strictly increasing.
    pub thresholds: Vec<u32>,
    pub max_neighbors: usize,
    /// Aggregator output channels C'.
    pub out_channels: usize,
}

impl Default for RoiPoolConfig {
    fn default() -> Self {
        RoiPoolConfig {
            grid_size: 6,
            thresholds: vec![2, 4],
            max_neighbors: 16,
            out_channels: 32,
        }
    }
}

impl RoiPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::InvalidConfig("grid_size must be >= 1".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "thresholds must be non-empty and strictly increasing, got {:?}",
                self.thresholds
            )));
        }
        if self.max_neighbors == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("max_neighbors and out_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn points_per_roi(&self) -> usize {
        self.grid_size.pow(3)
    }

    /// Flattened per-RoI width for `stages` pooled stages.
    pub fn feature_width(&self, stages: usize) -> usize {
        self.points_per_roi() * stages * self.thresholds.len() * self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    Original,
    #[default]
    Accelerated,
}

impl std::str::FromStr for AggMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(AggMode::Original),
            "accelerated" => Ok(AggMode::Accelerated),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregation mode `{other}` (expected original or accelerated)"
            ))),
        }
    }
}

/// Sub-voxel centers of an RoI, x fastest, then y, then z.
pub fn roi_grid_points(roi: &Box3D, grid_size: usize) -> Vec<[f64; 3]> {
    let g = grid_size as f64;
    let (s, c) = roi.yaw.sin_cos();
    let frac = |a: usize| (a as f64 + 0.5) / g - 0.5;
    let mut pts = Vec::with_capacity(grid_size.pow(3));
    for z in 0..grid_size {
        for y in 0..grid_size {
            for x in 0..grid_size {
                let (lx, ly, lz) = (frac(x) * roi.l, frac(y) * roi.w, frac(z) * roi.h);
                pts.push([roi.cx + lx * c - ly * s, roi.cy + lx * s + ly * c, roi.cz + lz]);
            }
        }
    }
    pts
}

/// Weights of one aggregation layer. `w` is `C' x (C + 3)`, columns ordered
/// feature first, then relative coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub w: Vec<f32>,
    pub w_f: Vec<f32>,
    pub w_c: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AggregatorWeights {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, w: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if w.len() != c_out * (c_in + 3) {
            return Err(Error::shape(format!("{name} weight"), c_out * (c_in + 3), w.len()));
        }
        if bias.len() != c_out {
            return Err(Error::shape(format!("{name} bias"), c_out, bias.len()));
        }
        let row = c_in + 3;
        let w_f = w.chunks_exact(row).flat_map(|r| r[..c_in].iter().copied()).collect();
        let w_c = w.chunks_exact(row).flat_map(|r| r[c_in..].iter().copied()).collect();
        Ok(AggregatorWeights {
            name,
            c_in,
            c_out,
            w,
            w_f,
            w_c,
            bias,
        })
    }

    pub fn init(name: impl Into<String>, c_in: usize, c_out: usize, init: &mut Initializer) -> Self {
        let w = init.uniform(c_out * (c_in + 3), c_in + 3);
        let bias = init.uniform(c_out, c_in + 3);
        Self::new(name, c_in, c_out, w, bias).expect("shapes are consistent by construction")
    }
}

/// One grouped neighbor: grid row and `voxel_center - grid_point` in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupedNeighbor {
    pub row: usize,
    pub rel: [f32; 3],
}

/// Per-neighbor `ReLU(W [f; rel] + b)`, channel max over each group.
/// Returns `groups.len() x C'`; empty groups give zeros. Adds
/// `(C + 3) * C'` to `macs` per neighbor.
pub fn aggregate_original(
    grid: &SparseVoxelGrid,
    groups: &[Vec<GroupedNeighbor>],
    w: &AggregatorWeights,
    macs: &mut u64,
) -> Result<Vec<f32>> {
    if grid.channels() != w.c_in {
        return Err(Error::shape(format!("{} input width", w.name), w.c_in, grid.channels()));
    }
    let (c, c_out) = (w.c_in, w.c_out);
    let row_len = c + 3;
    let mut out = vec![0.0f32; groups.len() * c_out];
    let mut h = vec![0.0f64; c_out];
    for (group, dst) in groups.iter().zip(out.chunks_exact_mut(c_out)) {
        for nb in group {
            let f = grid.feature(nb.row);
            for (co, hv) in h.iter_mut().enumerate() {
                let wr = &w.w[co * row_len..(co + 1) * row_len];
                let mut acc = f64::from(w.bias[co]);
                for (wv, x) in wr[..c].iter().zip(f) {
                    acc += f64::from(*wv) * f64::from(*x);
                }
                for (wv, x) in wr[c..].iter().zip(&nb.rel) {
                    acc += f64::from(*wv) * f64::from(*x);
                }
                *hv = acc;
            }
            *macs += (row_len * c_out) as u64;
            for (d, hv) in dst.iter_mut().zip(&h) {
                *d = d.max(relu(*hv as f32));
            }
        }
    }
    Ok(out)
}

/// `W_F` applied to every voxel feature of a grid, `N x C'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretransformed {
    pub rows: usize,
    pub c_out: usize,
    pub data: Vec<f64>,
}

pub fn pretransform(grid: &SparseVoxelGrid, w: &AggregatorWeights, macs: &mut u64) -> Result<Pretransformed> {
    if grid.channels() != w.c_in {
        return Err(Error::shape(format!("{} input width", w.name), w.c_in, grid.channels()));
    }
    let (c, c_out) = (w.c_in, w.c_out);
    let mut data = vec![0.0f64; grid.len() * c_out];
    data.par_chunks_mut(c_out.max(1)).enumerate().for_each(|(row, dst)| {
        let f = grid.feature(row);
        for (co, d) in dst.iter_mut().enumerate() {
            let wr = &w.w_f[co * c..(co + 1) * c];
            *d = wr.iter().zip(f).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
        }
    });
    *macs += (grid.len() * c * c_out) as u64;
    Ok(Pretransformed {
        rows: grid.len(),
        c_out,
        data,
    })
}

/// Same output as [`aggregate_original`] using pretransformed features:
/// per neighbor `ReLU(pre[row] + W_C rel + b)`, `3 * C'` MACs each.
pub fn aggregate_accelerated(
    grid: &SparseVoxelGrid,
    pre: &Pretransformed,
    groups: &[Vec<GroupedNeighbor>],
    w: &AggregatorWeights,
    macs: &mut u64,
) -> Result<Vec<f32>> {
    if pre.rows != grid.len() {
        return Err(Error::InvalidGrid(format!(
            "stale pretransformed features: {} rows for a grid of {} voxels",
            pre.rows,
            grid.len()
        )));
    }
    if pre.c_out != w.c_out {
        return Err(Error::shape(format!("{} pretransformed width", w.name), w.c_out, pre.c_out));
    }
    let c_out = w.c_out;
    let mut out = vec![0.0f32; groups.len() * c_out];
    for (group, dst) in groups.iter().zip(out.chunks_exact_mut(c_out)) {
        for nb in group {
            let p = &pre.data[nb.row * c_out..(nb.row + 1) * c_out];
            for (co, d) in dst.iter_mut().enumerate() {
                let wc = &w.w_c[co * 3..co * 3 + 3];
                let mut acc = f64::from(w.bias[co]) + p[co];
                for (wv, x) in wc.iter().zip(&nb.rel) {
                    acc += f64::from(*wv) * f64::from(*x);
                }
                *d = d.max(relu(acc as f32));
            }
            *macs += (3 * c_out) as u64;
        }
    }
    Ok(out)
}

/// Analytic multiply-accumulate count of the aggregation layer:
/// original `M K (C + 3) C'`, accelerated `N C C' + M K 3 C'`.
pub fn flop_count(mode: AggMode, n: u64, m: u64, k: u64, c: u64, c_out: u64) -> u64 {
    match mode {
        AggMode::Original => m * k * (c + 3) * c_out,
        AggMode::Accelerated => n * c * c_out + m * k * 3 * c_out,
    }
}

/// Aggregator weights for every (stage, scale) pair, stage-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolWeights {
    pub sets: Vec<AggregatorWeights>,
    pub scales: usize,
}

const POOL_STREAM: u64 = 2;

impl PoolWeights {
    pub fn init(seed: u64, stage_channels: &[usize], scales: usize, c_out: usize) -> Self {
        let mut init = Initializer::new(seed, POOL_STREAM);
        let mut sets = Vec::new();
        for (s, &c) in stage_channels.iter().enumerate() {
            for t in 0..scales {
                sets.push(AggregatorWeights::init(Self::name(s, t), c, c_out, &mut init));
            }
        }
        PoolWeights { sets, scales }
    }

    fn name(stage: usize, scale: usize) -> String {
        format!("roipool.stage{stage}.scale{scale}")
    }

    pub fn get(&self, stage: usize, scale: usize) -> &AggregatorWeights {
        &self.sets[stage * self.scales + scale]
    }

    pub fn to_tensors(&self, bundle: &mut ParamBundle) {
        for w in &self.sets {
            bundle.push(Tensor::new(format!("{}.weight", w.name), vec![w.c_out, w.c_in + 3], w.w.clone()));
            bundle.push(Tensor::new(format!("{}.bias", w.name), vec![w.c_out], w.bias.clone()));
        }
    }

    pub fn from_tensors(stage_channels: &[usize], scales: usize, c_out: usize, lookup: &TensorLookup<'_>) -> Result<Self> {
        let mut sets = Vec::new();
        for (s, &c) in stage_channels.iter().enumerate() {
            for t in 0..scales {
                let name = Self::name(s, t);
                let w = lookup.take(&format!("{name}.weight"), &[c_out, c + 3])?;
                let b = lookup.take(&format!("{name}.bias"), &[c_out])?;
                sets.push(AggregatorWeights::new(name, c, c_out, w, b)?);
            }
        }
        Ok(PoolWeights { sets, scales })
    }
}

/// Flattened pooled features, one row per RoI.
///
/// Row layout is grid-point major; within a point the channel blocks follow
/// (stage ascending, scale ascending), `C'` channels each.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeatures {
    pub width: usize,
    pub data: Vec<f32>,
    /// RoIs lying entirely outside the grid range (their rows are zero).
    pub outside: Vec<bool>,
    /// Multiply-accumulates spent in the aggregation layers.
    pub macs: u64,
    /// Grouped neighbors summed over RoIs and grid points, per
    /// (stage, scale) block.
    pub grouped: Vec<u64>,
}

impl RoiFeatures {
    pub fn len(&self) -> usize {
        self.outside.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outside.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width..(r + 1) * self.width]
    }
}

/// Pools every RoI over the given stage grids (typically strides 4 and 8).
///
/// RoIs are processed in parallel; output rows follow RoI order.
pub fn voxel_roi_pool(
    stages: &[&SparseVoxelGrid],
    rois: &[Box3D],
    cfg: &RoiPoolConfig,
    weights: &PoolWeights,
    mode: AggMode,
) -> Result<RoiFeatures> {
    cfg.validate()?;
    let scales = cfg.thresholds.len();
    if weights.scales != scales || weights.sets.len() != stages.len() * scales {
        return Err(Error::shape("pool weight sets", stages.len() * scales, weights.sets.len()));
    }
    for (s, grid) in stages.iter().enumerate() {
        for t in 0..scales {
            let w = weights.get(s, t);
            if w.c_in != grid.channels() {
                return Err(Error::shape(format!("{} input width", w.name), w.c_in, grid.channels()));
            }
            if w.c_out != cfg.out_channels {
                return Err(Error::shape(format!("{} output width", w.name), cfg.out_channels, w.c_out));
            }
        }
    }
    let c_out = cfg.out_channels;
    let points = cfg.points_per_roi();
    let blocks = stages.len() * scales;
    let width = points * blocks * c_out;
    let query = VoxelQuery::new(*cfg.thresholds.last().expect("validated non-empty"));

    let mut macs = 0u64;
    let pre: Vec<Option<Pretransformed>> = match mode {
        AggMode::Original => vec![None; blocks],
        AggMode::Accelerated => {
            let mut v = Vec::with_capacity(blocks);
            for (s, grid) in stages.iter().enumerate() {
                for t in 0..scales {
                    v.push(Some(pretransform(grid, weights.get(s, t), &mut macs)?));
                }
            }
            v
        }
    };

    let per_roi: Vec<(Vec<f32>, bool, u64, Vec<u64>)> = rois
        .par_iter()
        .map(|roi| {
            let mut row = vec![0.0f32; width];
            let mut macs = 0u64;
            let mut grouped = vec![0u64; blocks];
            let grid_pts = roi_grid_points(roi, cfg.grid_size);
            let range_cfg = stages.first().map(|g| g.config());
            let outside = range_cfg.is_some_and(|rc| grid_pts.iter().all(|p| rc.cell_of(*p, 1).is_none()));
            if outside {
                return Ok((row, true, 0, grouped));
            }
            for (s, grid) in stages.iter().enumerate() {
                let mut groups: Vec<Vec<Vec<GroupedNeighbor>>> = vec![Vec::with_capacity(points); scales];
                for p in &grid_pts {
                    let sets = query.query_multi(grid, *p, &cfg.thresholds, cfg.max_neighbors)?;
                    for (t, set) in sets.iter().enumerate() {
                        grouped[s * scales + t] += set.len() as u64;
                        groups[t].push(
                            set.neighbors
                                .iter()
                                .map(|n| {
                                    let v = grid.center(n.row);
                                    GroupedNeighbor {
                                        row: n.row,
                                        rel: [(v[0] - p[0]) as f32, (v[1] - p[1]) as f32, (v[2] - p[2]) as f32],
                                    }
                                })
                                .collect(),
                        );
                    }
                }
                for (t, g) in groups.iter().enumerate() {
                    let w = weights.get(s, t);
                    let agg = match &pre[s * scales + t] {
                        None => aggregate_original(grid, g, w, &mut macs)?,
                        Some(pre) => aggregate_accelerated(grid, pre, g, w, &mut macs)?,
                    };
                    let block = s * scales + t;
                    for (pt, vals) in agg.chunks_exact(c_out).enumerate() {
                        let start = (pt * blocks + block) * c_out;
                        row[start..start + c_out].copy_from_slice(vals);
                    }
                }
            }
            Ok((row, false, macs, grouped))
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(rois.len() * width);
    let mut outside = Vec::with_capacity(rois.len());
    let mut grouped = vec![0u64; blocks];
    for (row, out, m, g) in per_roi {
        data.extend_from_slice(&row);
        outside.push(out);
        macs += m;
        grouped.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok(RoiFeatures {
        width,
        data,
        outside,
        macs,
        grouped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: 256 }
    }
}

/// Shared two-layer MLP with sibling confidence and regression layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub cls: DenseLayer,
    pub reg: DenseLayer,
}

const HEAD_STREAM: u64 = 3;

impl HeadParams {
    pub fn init(seed: u64, width: usize, hidden: usize) -> Self {
        let mut init = Initializer::new(seed, HEAD_STREAM);
        HeadParams {
            fc1: DenseLayer::init("head.fc1", width, hidden, &mut init),
            fc2: DenseLayer::init("head.fc2", hidden, hidden, &mut init),
            cls: DenseLayer::init("head.cls", hidden, 1, &mut init),
            reg: DenseLayer::init("head.reg", hidden, 7, &mut init),
        }
    }

    pub fn zeros(width: usize, hidden: usize) -> Self {
        HeadParams {
            fc1: DenseLayer::zeros("head.fc1", width, hidden),
            fc2: DenseLayer::zeros("head.fc2", hidden, hidden),
            cls: DenseLayer::zeros("head.cls", hidden, 1),
            reg: DenseLayer::zeros("head.reg", hidden, 7),
        }
    }

    pub fn width(&self) -> usize {
        self.fc1.c_in
    }

    pub fn to_tensors(&self, bundle: &mut ParamBundle) {
        for l in [&self.fc1, &self.fc2, &self.cls, &self.reg] {
            l.to_tensors(bundle);
        }
    }

    pub fn from_tensors(width: usize, hidden: usize, lookup: &TensorLookup<'_>) -> Result<Self> {
        Ok(HeadParams {
            fc1: DenseLayer::from_tensors("head.fc1", width, hidden, lookup)?,
            fc2: DenseLayer::from_tensors("head.fc2", hidden, hidden, lookup)?,
            cls: DenseLayer::from_tensors("head.cls", hidden, 1, lookup)?,
            reg: DenseLayer::from_tensors("head.reg", hidden, 7, lookup)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub confidence: f64,
    pub residual: [f64; 7],
}

pub fn detect_head_forward(features: &RoiFeatures, params: &HeadParams) -> Result<Vec<HeadOutput>> {
    if features.width != params.width() {
        return Err(Error::shape("detect head input width", params.width(), features.width));
    }
    (0..features.len())
        .into_par_iter()
        .map(|r| {
            let hidden = params.fc1.c_out;
            let mut h1 = vec![0.0; hidden];
            params.fc1.forward(features.row(r), &mut h1)?;
            h1.iter_mut().for_each(|v| *v = relu(*v));
            let mut h2 = vec![0.0; params.fc2.c_out];
            params.fc2.forward(&h1, &mut h2)?;
            h2.iter_mut().for_each(|v| *v = relu(*v));
            let mut logit = [0.0f32];
            params.cls.forward(&h2, &mut logit)?;
            let mut reg = [0.0f32; 7];
            params.reg.forward(&h2, &mut reg)?;
            Ok(HeadOutput {
                confidence: sigmoid(f64::from(logit[0])),
                residual: reg.map(f64::from),
            })
        })
        .collect()
}
