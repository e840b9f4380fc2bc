//! Voxel RoI pooling detection pipeline.
//!
//! The crate turns raw LiDAR point clouds into sparse voxel grids, runs a
//! small sparse 3D backbone and a BEV region proposal network, and refines
//! proposals by pooling voxel features around RoI grid points. Neighbors are
//! found with an index-translation voxel query instead of a ball query, and
//! the per-neighbor transform can run in an accelerated, decomposed form.
//!
//! Module map:
//!
//! * [`geom3d`] oriented boxes, rotated IoU, NMS, residual coding, anchors
//! * [`voxelizer`] point clouds to sparse grids, voxel centers, BEV flattening
//! * [`sparsenet`] sparse 3D convolution backbone, 2D backbone, RPN heads
//! * [`vquery`] Manhattan voxel query and the brute-force ball query
//! * [`roipool`] RoI grid points, local aggregation, pooling and detect head
//! * [`targets`] target assignment and loss evaluators
//! * [`harness`] synthetic scenes, file IO, AP evaluation, pipeline, self-test
//! * [`oracle`] slow reference implementations used to cross-check the above

pub mod error;
pub mod geom3d;
pub mod harness;
pub mod oracle;
pub mod params;
pub mod roipool;
pub mod sparsenet;
pub mod targets;
pub mod voxelizer;
pub mod vquery;

pub use error::{Error, Result};
pub use geom3d::{AnchorConfig, Box3D, IouKind, ScoredBox};
pub use harness::config::PipelineConfig;
pub use harness::eval::{ApMode, EvalResult};
pub use roipool::{AggMode, AggregatorWeights, HeadParams, RoiPoolConfig};
pub use sparsenet::NetworkParams;
pub use targets::{HeadLossConfig, LossBreakdown};
pub use voxelizer::{Point, PointCloud, SparseVoxelGrid, VoxelCoord, VoxelizationConfig};
pub use vquery::{NeighborSet, QuerySpec};
