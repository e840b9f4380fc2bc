//! Seeded synthetic LiDAR-like scenes: car-sized boxes on a flat ground
//! plane, points on the visible box faces, and uniform ground clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geom3d::{bev_intersection_area, Box3D};
use crate::voxelizer::{voxelize, Point, PointCloud, VoxelizationConfig};

const CAR_DIMS: [f64; 3] = [3.9, 1.6, 1.56];
const DIM_JITTER: f64 = 0.2;
const PLACEMENT_RETRIES: usize = 200;
const EDGE_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub points_per_object: usize,
    pub clutter_points: usize,
    /// Upper bound on the fraction of occupied voxels.
    pub target_occupancy: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            points_per_object: 600,
            clutter_points: 16_000,
            target_occupancy: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub gts: Vec<Box3D>,
    pub seed: u64,
    pub requested: usize,
    pub target_occupancy: f64,
}

impl SyntheticScene {
    /// Objects that could not be placed without overlap.
    pub fn dropped(&self) -> usize {
        self.requested - self.gts.len()
    }
}

/// Ground height: 30% up the vertical range, so boxes and clutter fit inside.
pub fn ground_z(cfg: &VoxelizationConfig) -> f64 {
    cfg.range_min[2] + 0.3 * (cfg.range_max[2] - cfg.range_min[2])
}

pub fn synth_scene(seed: u64, n_objects: usize, cfg: &VoxelizationConfig) -> Result<SyntheticScene> {
    synth_scene_with(seed, n_objects, cfg, &SynthConfig::default())
}

pub fn synth_scene_with(seed: u64, n_objects: usize, cfg: &VoxelizationConfig, sc: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground = ground_z(cfg);
    let lo = [cfg.range_min[0] + EDGE_MARGIN, cfg.range_min[1] + EDGE_MARGIN];
    let hi = [cfg.range_max[0] - EDGE_MARGIN, cfg.range_max[1] - EDGE_MARGIN];

    let mut gts: Vec<Box3D> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        for _ in 0..PLACEMENT_RETRIES {
            let dims: [f64; 3] = std::array::from_fn(|a| CAR_DIMS[a] * rng.gen_range(1.0 - DIM_JITTER..=1.0 + DIM_JITTER));
            let center = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), ground + dims[2] / 2.0];
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let b = Box3D::new(center, dims, yaw)?;
            if gts.iter().all(|g| bev_intersection_area(g, &b) == 0.0) {
                gts.push(b);
                break;
            }
        }
    }

    let mut points = Vec::with_capacity(gts.len() * sc.points_per_object + sc.clutter_points);
    for b in &gts {
        surface_points(b, sc.points_per_object, &mut rng, &mut points);
    }
    for _ in 0..sc.clutter_points {
        let x = rng.gen_range(cfg.range_min[0]..cfg.range_max[0]);
        let y = rng.gen_range(cfg.range_min[1]..cfg.range_max[1]);
        let z = ground + rng.gen_range(-0.05..0.05);
        points.push(Point::new(x as f32, y as f32, z as f32, rng.gen_range(0.0..0.3)));
    }
    Ok(SyntheticScene {
        cloud: PointCloud::new(points),
        gts,
        seed,
        requested: n_objects,
        target_occupancy: sc.target_occupancy,
    })
}

/// Uniform samples over the four sides and the roof, by face area.
fn surface_points(b: &Box3D, n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
    let faces = [b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h, b.l * b.w];
    let total: f64 = faces.iter().sum();
    let (s, c) = b.yaw.sin_cos();
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut face = 0;
        while face < 4 && pick >= faces[face] {
            pick -= faces[face];
            face += 1;
        }
        let (u, v) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let local = match face {
            0 => [0.5 * b.l, u * b.w, v * b.h],
            1 => [-0.5 * b.l, u * b.w, v * b.h],
            2 => [u * b.l, 0.5 * b.w, v * b.h],
            3 => [u * b.l, -0.5 * b.w, v * b.h],
            _ => [u * b.l, v * b.w, 0.5 * b.h],
        };
        let x = b.cx + local[0] * c - local[1] * s;
        let y = b.cy + local[0] * s + local[1] * c;
        let z = b.cz + local[2];
        out.push(Point::new(x as f32, y as f32, z as f32, rng.gen_range(0.2..1.0)));
    }
}

/// Fraction of grid cells occupied after voxelization.
pub fn occupancy(cloud: &PointCloud, cfg: &VoxelizationConfig) -> Result<f64> {
    let grid = voxelize(cloud, cfg)?;
    let d = cfg.grid_dims();
    Ok(grid.len() as f64 / (f64::from(d[0]) * f64::from(d[1]) * f64::from(d[2])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::io::encode_bin;

    #[test]
    fn no_objects_is_clutter_only() {
        let s = synth_scene(1, 0, &VoxelizationConfig::kitti()).unwrap();
        assert!(s.gts.is_empty());
        assert_eq!(s.cloud.len(), SynthConfig::default().clutter_points);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = VoxelizationConfig::kitti();
        let a = synth_scene(42, 8, &cfg).unwrap();
        let b = synth_scene(42, 8, &cfg).unwrap();
        assert_eq!(encode_bin(&a.cloud), encode_bin(&b.cloud));
        assert_eq!(a.gts, b.gts);
        assert_ne!(encode_bin(&synth_scene(43, 8, &cfg).unwrap().cloud), encode_bin(&a.cloud));
    }

    #[test]
    fn boxes_in_range_and_disjoint() {
        let cfg = VoxelizationConfig::kitti();
        let s = synth_scene(7, 15, &cfg).unwrap();
        assert_eq!(s.gts.len(), 15);
        for (i, a) in s.gts.iter().enumerate() {
            for c in a.bev_corners() {
                assert!(c[0] >= cfg.range_min[0] && c[0] < cfg.range_max[0]);
                assert!(c[1] >= cfg.range_min[1] && c[1] < cfg.range_max[1]);
            }
            assert!(a.z_min() >= cfg.range_min[2] && a.z_max() < cfg.range_max[2]);
            for b in &s.gts[i + 1..] {
                assert_eq!(bev_intersection_area(a, b), 0.0);
            }
            for d in [a.l / 3.9, a.w / 1.6, a.h / 1.56] {
                assert!((0.8..=1.2).contains(&d));
            }
        }
    }

    #[test]
    fn default_occupancy_is_sparse() {
        for cfg in [VoxelizationConfig::kitti(), VoxelizationConfig::waymo()] {
            let s = synth_scene(3, 20, &cfg).unwrap();
            assert!(occupancy(&s.cloud, &cfg).unwrap() <= 0.03);
        }
    }

    #[test]
    fn crowded_scene_reports_dropped() {
        let cfg = VoxelizationConfig {
            range_min: [0.0, 0.0, -3.0],
            range_max: [14.0, 14.0, 1.0],
            ..VoxelizationConfig::kitti()
        };
        let s = synth_scene(5, 50, &cfg).unwrap();
        assert!(s.dropped() > 0);
        assert_eq!(s.gts.len() + s.dropped(), 50);
    }
}
