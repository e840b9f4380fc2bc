//! The single JSON document that configures every stage.
//!
//! Every key has a default, so `{}` is a complete KITTI-preset config and a
//! file only needs the keys it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{AnchorConfig, IouKind};
use crate::harness::eval::ApMode;
use crate::roipool::{AggMode, HeadConfig, RoiPoolConfig};
use crate::sparsenet::{ArchConfig, RpnConfig};
use crate::targets::{FocalParams, HeadLossConfig, HuberParams, RpnAssignConfig};
use crate::voxelizer::VoxelizationConfig;

/// How the final detection score is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Head confidence alone.
    #[default]
    Confidence,
    /// Head confidence times the proposal score.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalNmsConfig {
    pub threshold: f64,
    pub kind: IouKind,
}

impl Default for FinalNmsConfig {
    fn default() -> Self {
        FinalNmsConfig {
            threshold: 0.1,
            kind: IouKind::Bev,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: ApMode,
    pub kind: IouKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.7,
            mode: ApMode::R40,
            kind: IouKind::ThreeD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub voxelization: VoxelizationConfig,
    pub arch: ArchConfig,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub roi_pool: RoiPoolConfig,
    pub aggregation: AggMode,
    pub head: HeadConfig,
    pub score_mode: ScoreMode,
    pub final_nms: FinalNmsConfig,
    pub rpn_assign: RpnAssignConfig,
    pub focal: FocalParams,
    pub huber: HuberParams,
    pub head_loss: HeadLossConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn kitti() -> Self {
        Self::default()
    }

    pub fn waymo() -> Self {
        PipelineConfig {
            voxelization: VoxelizationConfig::waymo(),
            arch: ArchConfig::waymo(),
            roi_pool: RoiPoolConfig {
                out_channels: 64,
                ..RoiPoolConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.voxelization.validate()?;
        self.arch.validate()?;
        self.anchors.validate()?;
        self.roi_pool.validate()?;
        self.head_loss.validate()?;
        if self.head.hidden == 0 {
            return Err(Error::InvalidConfig("head.hidden must be >= 1".into()));
        }
        if self.anchors.bev_stride != crate::sparsenet::STAGE_STRIDES[3] {
            return Err(Error::InvalidConfig(format!(
                "anchors.bev_stride must match the BEV map stride {}",
                crate::sparsenet::STAGE_STRIDES[3]
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
