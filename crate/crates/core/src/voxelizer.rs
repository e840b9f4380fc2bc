//! Point clouds to sparse voxel grids, voxel centers, and BEV flattening.

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits per axis in a packed coordinate key.
pub const KEY_BITS: u32 = 21;
pub const MAX_AXIS_CELLS: u32 = 1 << KEY_BITS;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    fn xyz(&self) -> [f64; 3] {
        [f64::from(self.x), f64::from(self.y), f64::from(self.z)]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelizationConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    pub max_voxels: usize,
}

impl Default for VoxelizationConfig {
    fn default() -> Self {
        Self::kitti()
    }
}

impl VoxelizationConfig {
    /// x in [0, 70.4], y in [-40, 40], z in [-3, 1]; voxels 0.05 x 0.05 x 0.1 m.
    pub fn kitti() -> Self {
        VoxelizationConfig {
            range_min: [0.0, -40.0, -3.0],
            range_max: [70.4, 40.0, 1.0],
            voxel_size: [0.05, 0.05, 0.1],
            max_points_per_voxel: 5,
            max_voxels: 40_000,
        }
    }

    /// x, y in [-75.2, 75.2], z in [-2, 4]; voxels 0.1 x 0.1 x 0.15 m.
    pub fn waymo() -> Self {
        VoxelizationConfig {
            range_min: [-75.2, -75.2, -2.0],
            range_max: [75.2, 75.2, 4.0],
            voxel_size: [0.1, 0.1, 0.15],
            max_points_per_voxel: 5,
            max_voxels: 150_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (lo, hi, size) = (self.range_min[axis], self.range_max[axis], self.voxel_size[axis]);
            if !(lo.is_finite() && hi.is_finite() && size.is_finite()) {
                return Err(Error::InvalidConfig(format!("non-finite range on axis {axis}")));
            }
            if hi <= lo {
                return Err(Error::InvalidConfig(format!(
                    "range_max ({hi}) must exceed range_min ({lo}) on axis {axis}"
                )));
            }
            if size <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "voxel size must be positive on axis {axis}, got {size}"
                )));
            }
            let cells = ((hi - lo) / size + 1e-6).floor();
            if cells < 1.0 || cells >= f64::from(MAX_AXIS_CELLS) {
                return Err(Error::InvalidConfig(format!(
                    "axis {axis} has {cells} cells; supported range is 1..{MAX_AXIS_CELLS}"
                )));
            }
        }
        if self.max_points_per_voxel == 0 || self.max_voxels == 0 {
            return Err(Error::InvalidConfig("voxel caps must be >= 1".into()));
        }
        Ok(())
    }

    /// Stride-1 grid dims, floor((max - min) / size) per axis.
    pub fn grid_dims(&self) -> [u32; 3] {
        std::array::from_fn(|a| {
            ((self.range_max[a] - self.range_min[a]) / self.voxel_size[a] + 1e-6).floor() as u32
        })
    }

    /// Grid dims after downsampling by `stride` (ceil division).
    pub fn dims_at_stride(&self, stride: u32) -> [u32; 3] {
        self.grid_dims().map(|d| d.div_ceil(stride))
    }

    /// Cell of a metric point at the given stride, or `None` outside the range.
    pub fn cell_of(&self, p: [f64; 3], stride: u32) -> Option<VoxelCoord> {
        let dims = self.dims_at_stride(stride);
        let mut idx = [0u32; 3];
        for a in 0..3 {
            if !(p[a] >= self.range_min[a] && p[a] < self.range_max[a]) {
                return None;
            }
            let f = ((p[a] - self.range_min[a]) / (self.voxel_size[a] * f64::from(stride))).floor();
            if f < 0.0 || f >= f64::from(dims[a]) {
                return None;
            }
            idx[a] = f as u32;
        }
        Some(VoxelCoord::new(idx[0], idx[1], idx[2]))
    }
}

/// Integer voxel index; ordering is lexicographic on (i, j, k).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub i: u32,
    pub j: u32,
    pub k: u32,
}

impl VoxelCoord {
    pub const fn new(i: u32, j: u32, k: u32) -> Self {
        VoxelCoord { i, j, k }
    }

    pub fn key(self) -> u64 {
        u64::from(self.i) | (u64::from(self.j) << KEY_BITS) | (u64::from(self.k) << (2 * KEY_BITS))
    }

    pub fn within(self, dims: [u32; 3]) -> bool {
        self.i < dims[0] && self.j < dims[1] && self.k < dims[2]
    }

    pub fn as_array(self) -> [u32; 3] {
        [self.i, self.j, self.k]
    }

    /// `self + delta` if the result stays non-negative and inside `dims`.
    pub fn offset(self, delta: [i32; 3], dims: [u32; 3]) -> Option<VoxelCoord> {
        let i = i64::from(self.i) + i64::from(delta[0]);
        let j = i64::from(self.j) + i64::from(delta[1]);
        let k = i64::from(self.k) + i64::from(delta[2]);
        if i < 0 || j < 0 || k < 0 || i >= i64::from(dims[0]) || j >= i64::from(dims[1]) || k >= i64::from(dims[2]) {
            return None;
        }
        Some(VoxelCoord::new(i as u32, j as u32, k as u32))
    }
}

/// Metric center of a voxel: `min + (index + 0.5) * size * stride` per axis.
pub fn voxel_center(coord: VoxelCoord, cfg: &VoxelizationConfig, stride: u32) -> Result<[f64; 3]> {
    let dims = cfg.dims_at_stride(stride);
    if !coord.within(dims) {
        return Err(Error::OutOfBounds {
            i: coord.i,
            j: coord.j,
            k: coord.k,
            dims,
        });
    }
    Ok(center_unchecked(coord, cfg, stride))
}

pub(crate) fn center_unchecked(coord: VoxelCoord, cfg: &VoxelizationConfig, stride: u32) -> [f64; 3] {
    let c = coord.as_array();
    std::array::from_fn(|a| {
        cfg.range_min[a] + (f64::from(c[a]) + 0.5) * cfg.voxel_size[a] * f64::from(stride)
    })
}

fn linear(c: VoxelCoord, dims: [u32; 3]) -> usize {
    (c.i as usize * dims[1] as usize + c.j as usize) * dims[2] as usize + c.k as usize
}

/// Sparse feature volume: unique coords, one feature row per coord.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    config: VoxelizationConfig,
    stride: u32,
    dims: [u32; 3],
    channels: usize,
    coords: Vec<VoxelCoord>,
    features: Vec<f32>,
    index: FxHashMap<u64, u32>,
    // one bit per cell, so empty probes skip the hash table
    occupied: Vec<u64>,
}

impl SparseVoxelGrid {
    /// Builds a grid, checking bounds, uniqueness and feature shape.
    pub fn new(
        config: VoxelizationConfig,
        stride: u32,
        channels: usize,
        coords: Vec<VoxelCoord>,
        features: Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        if stride == 0 {
            return Err(Error::InvalidGrid("stride must be >= 1".into()));
        }
        if features.len() != coords.len() * channels {
            return Err(Error::shape("grid features", coords.len() * channels, features.len()));
        }
        let dims = config.dims_at_stride(stride);
        let mut index = FxHashMap::with_capacity_and_hasher(coords.len(), Default::default());
        let cells = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut occupied = vec![0u64; cells.div_ceil(64)];
        for (row, c) in coords.iter().enumerate() {
            if !c.within(dims) {
                return Err(Error::OutOfBounds {
                    i: c.i,
                    j: c.j,
                    k: c.k,
                    dims,
                });
            }
            if index.insert(c.key(), row as u32).is_some() {
                return Err(Error::InvalidGrid(format!("duplicate coordinate {c:?}")));
            }
            let lin = linear(*c, dims);
            occupied[lin / 64] |= 1 << (lin % 64);
        }
        Ok(SparseVoxelGrid {
            config,
            stride,
            dims,
            channels,
            coords,
            features,
            index,
            occupied,
        })
    }

    pub fn empty(config: VoxelizationConfig, stride: u32, channels: usize) -> Result<Self> {
        Self::new(config, stride, channels, Vec::new(), Vec::new())
    }

    pub fn config(&self) -> &VoxelizationConfig {
        &self.config
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    /// Row-major N x C feature matrix.
    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature(&self, row: usize) -> &[f32] {
        &self.features[row * self.channels..(row + 1) * self.channels]
    }

    pub fn lookup(&self, coord: VoxelCoord) -> Option<usize> {
        if !coord.within(self.dims) {
            return None;
        }
        let lin = linear(coord, self.dims);
        if self.occupied[lin / 64] & (1 << (lin % 64)) == 0 {
            return None;
        }
        self.index.get(&coord.key()).map(|&r| r as usize)
    }

    pub fn center(&self, row: usize) -> [f64; 3] {
        center_unchecked(self.coords[row], &self.config, self.stride)
    }

    /// Metric size of one cell of this grid.
    pub fn cell_size(&self) -> [f64; 3] {
        self.config.voxel_size.map(|s| s * f64::from(self.stride))
    }

    /// Same grid with coords sorted lexicographically.
    pub fn sorted(&self) -> SparseVoxelGrid {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&r| self.coords[r]);
        let coords = order.iter().map(|&r| self.coords[r]).collect();
        let features = order.iter().flat_map(|&r| self.feature(r).iter().copied()).collect();
        SparseVoxelGrid::new(self.config.clone(), self.stride, self.channels, coords, features)
            .expect("permuting a valid grid keeps it valid")
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GridFile {
            stride: self.stride,
            dims: self.dims,
            channels: self.channels,
            coords: self.coords.iter().map(|c| c.as_array()).collect(),
            features: self.features.clone(),
            config: self.config.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GridFile = serde_json::from_str(text)?;
        let grid = SparseVoxelGrid::new(
            file.config,
            file.stride,
            file.channels,
            file.coords.into_iter().map(|[i, j, k]| VoxelCoord::new(i, j, k)).collect(),
            file.features,
        )?;
        if grid.dims != file.dims {
            return Err(Error::InvalidGrid(format!(
                "stored dims {:?} disagree with config dims {:?}",
                file.dims, grid.dims
            )));
        }
        Ok(grid)
    }
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    stride: u32,
    dims: [u32; 3],
    channels: usize,
    coords: Vec<[u32; 3]>,
    features: Vec<f32>,
    config: VoxelizationConfig,
}

/// Number of input feature channels produced by [`voxelize`].
pub const INPUT_CHANNELS: usize = 4;

/// Quantizes a cloud into a stride-1 grid with per-voxel mean (x, y, z, intensity).
///
/// Points outside the half-open range are dropped. Both caps are first-come
/// in input order; the result is sorted lexicographically by coordinate.
pub fn voxelize(cloud: &PointCloud, cfg: &VoxelizationConfig) -> Result<SparseVoxelGrid> {
    cfg.validate()?;
    struct Slot {
        coord: VoxelCoord,
        sums: [f64; 4],
        count: usize,
    }
    let mut slot_of: FxHashMap<u64, usize> = FxHashMap::default();
    let mut slots: Vec<Slot> = Vec::new();
    for p in &cloud.points {
        let Some(coord) = cfg.cell_of(p.xyz(), 1) else {
            continue;
        };
        let slot = match slot_of.get(&coord.key()) {
            Some(&s) => s,
            None => {
                if slots.len() >= cfg.max_voxels {
                    continue;
                }
                slot_of.insert(coord.key(), slots.len());
                slots.push(Slot {
                    coord,
                    sums: [0.0; 4],
                    count: 0,
                });
                slots.len() - 1
            }
        };
        let s = &mut slots[slot];
        if s.count < cfg.max_points_per_voxel {
            let vals = [p.x, p.y, p.z, p.intensity];
            for (acc, v) in s.sums.iter_mut().zip(vals) {
                *acc += f64::from(v);
            }
            s.count += 1;
        }
    }
    slots.sort_by_key(|s| s.coord);
    let coords = slots.iter().map(|s| s.coord).collect();
    let features = slots
        .iter()
        .flat_map(|s| s.sums.map(|v| (v / s.count as f64) as f32))
        .collect();
    SparseVoxelGrid::new(cfg.clone(), 1, INPUT_CHANNELS, coords, features)
}

/// Dense BEV map stored x-major: element `(x, y, ch)` at `(x * ny + y) * channels + ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl BevMap {
    pub fn zeros(nx: usize, ny: usize, channels: usize) -> Self {
        BevMap {
            nx,
            ny,
            channels,
            data: vec![0.0; nx * ny * channels],
        }
    }

    pub fn at(&self, x: usize, y: usize, ch: usize) -> f32 {
        self.data[(x * self.ny + y) * self.channels + ch]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (x * self.ny + y) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nx, self.ny, self.channels]
    }
}

/// Stacks z-slices into channels: channel `k * C + c` holds feature `c` of slice `k`.
pub fn to_bev(grid: &SparseVoxelGrid) -> BevMap {
    let [nx, ny, nz] = grid.dims();
    let c = grid.channels();
    let mut bev = BevMap::zeros(nx as usize, ny as usize, c * nz as usize);
    for (row, coord) in grid.coords().iter().enumerate() {
        let base = (coord.i as usize * bev.ny + coord.j as usize) * bev.channels + coord.k as usize * c;
        bev.data[base..base + c].copy_from_slice(grid.feature(row));
    }
    bev
}
