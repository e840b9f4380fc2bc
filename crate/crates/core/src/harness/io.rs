//! Point cloud and box file formats.
//!
//! Binary clouds are flat little-endian f32 quadruples `x y z intensity`, 16
//! bytes per point. Text clouds hold the same four numbers per line. Box
//! files use one `cx cy cz l w h yaw [score]` line per box.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom3d::{format_boxes, format_scored_boxes, parse_boxes, Box3D, ScoredBox};
use crate::voxelizer::{Point, PointCloud};

pub const POINT_BYTES: usize = 16;

/// Decodes a binary cloud; `path` is only used for error messages.
pub fn parse_bin(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(Error::TruncatedPoints {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            offset: (bytes.len() - bytes.len() % POINT_BYTES) as u64,
        });
    }
    let points = bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            Point::new(f(0), f(4), f(8), f(12))
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn encode_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_bin(&bytes, path)
}

pub fn write_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_bin(cloud)).map_err(|e| Error::io(path, e))
}

pub fn parse_text_cloud(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals = t
            .split_whitespace()
            .map(str::parse::<f32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("expected 4 fields (x y z intensity), found {}", vals.len()),
            });
        }
        points.push(Point::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(PointCloud::new(points))
}

/// Reads a `.txt` cloud as text and anything else as binary.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if path.extension().is_some_and(|e| e == "txt") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_text_cloud(&text)
    } else {
        read_bin(path)
    }
}

pub fn read_boxes(path: &Path) -> Result<Vec<(Box3D, Option<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text)
}

/// Detections: every line must carry a score.
pub fn read_detections(path: &Path) -> Result<Vec<ScoredBox>> {
    read_boxes(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (b, s))| {
            s.map(|s| ScoredBox::new(b, s)).ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: "detection line has no score".into(),
            })
        })
        .collect()
}

pub fn write_detections(path: &Path, dets: &[ScoredBox]) -> Result<()> {
    fs::write(path, format_scored_boxes(dets)).map_err(|e| Error::io(path, e))
}

pub fn write_boxes(path: &Path, boxes: &[Box3D]) -> Result<()> {
    fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}
