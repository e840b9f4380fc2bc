//! Oriented 3D boxes: rotated IoU, NMS, residual coding and anchor tiling.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxelizer::VoxelizationConfig;

/// Vertex-ordering tolerance for the polygon clipper.
const CLIP_EPS: f64 = 1e-9;

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = angle - two_pi * ((angle + PI) / two_pi).floor();
    // floor() rounding can leave a == pi or a hair below -pi
    if a >= PI {
        a -= two_pi;
    }
    if a < -PI {
        a = -PI;
    }
    a
}

/// 7-DoF box: center, length (along heading), width, height and yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Builds a validated box; yaw is wrapped into `[-pi, pi)`.
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Box3D {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: dims[0],
            w: dims[1],
            h: dims[2],
            yaw: normalize_angle(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "dimensions must be positive, got ({}, {}, {})",
                self.l, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.cx + x * c - y * s, self.cy + x * s + y * c])
    }

    /// True when the point lies inside the box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        let (s, c) = self.yaw.sin_cos();
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        lx.abs() <= 0.5 * self.l
            && ly.abs() <= 0.5 * self.w
            && (p[2] - self.cz).abs() <= 0.5 * self.h
    }

    fn bev_radius(&self) -> f64 {
        0.5 * (self.l * self.l + self.w * self.w).sqrt()
    }

    /// `cx cy cz l w h yaw [score]` with six decimals.
    pub fn to_line(&self, score: Option<f64>) -> String {
        let mut s = format!(
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw
        );
        if let Some(score) = score {
            let _ = write!(s, " {score:.6}");
        }
        s
    }
}

/// A box with a detection score and class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    #[serde(default)]
    pub label: u32,
}

impl ScoredBox {
    pub fn new(bbox: Box3D, score: f64) -> Self {
        ScoredBox {
            bbox,
            score,
            label: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
}

impl std::str::FromStr for IouKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bev" => Ok(IouKind::Bev),
            "3d" => Ok(IouKind::ThreeD),
            other => Err(Error::InvalidConfig(format!(
                "unknown IoU kind `{other}` (expected bev or 3d)"
            ))),
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clip of a convex polygon by a CCW convex clip polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for e in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[e];
        let b = clip[(e + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for idx in 0..m {
            let cur = input[idx];
            let prev = input[(idx + m - 1) % m];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Area of the intersection of the two BEV footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let reach = a.bev_radius() + b.bev_radius();
    if dx * dx + dy * dy >= reach * reach {
        return 0.0;
    }
    let clipped = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&clipped).min(a.l * a.w).min(b.l * b.w)
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter_area = bev_intersection_area(a, b);
    if inter_area <= 0.0 {
        return 0.0;
    }
    let inter = inter_area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou(a: &Box3D, b: &Box3D, kind: IouKind) -> f64 {
    match kind {
        IouKind::Bev => iou_bev(a, b),
        IouKind::ThreeD => iou_3d(a, b),
    }
}

/// Indices sorted by descending score; equal scores keep the lower index first.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy NMS. Returns kept indices in descending score order.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, kind: IouKind) -> Vec<usize> {
    nms_top_k(boxes, iou_threshold, kind, usize::MAX)
}

/// Greedy NMS that stops once `max_keep` boxes survive.
///
/// Greedy suppression only looks at boxes already kept, so stopping early
/// returns exactly the first `max_keep` entries of the full NMS result.
pub fn nms_top_k(
    boxes: &[ScoredBox],
    iou_threshold: f64,
    kind: IouKind,
    max_keep: usize,
) -> Vec<usize> {
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for idx in score_order(&scores) {
        if kept.len() >= max_keep {
            break;
        }
        let cand = &boxes[idx].bbox;
        let suppressed = kept
            .iter()
            .any(|&k| iou(&boxes[k].bbox, cand, kind) > iou_threshold);
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}

/// Residual from an anchor (or proposal) to a target box.
pub type Residual = [f64; 7];

/// Diagonal-normalized residual: center offsets over the anchor BEV diagonal
/// (z over anchor height), log dimension ratios, wrapped yaw difference.
pub fn encode_box(anchor: &Box3D, target: &Box3D) -> Residual {
    let diag = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    [
        (target.cx - anchor.cx) / diag,
        (target.cy - anchor.cy) / diag,
        (target.cz - anchor.cz) / anchor.h,
        (target.l / anchor.l).ln(),
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
        normalize_angle(target.yaw - anchor.yaw),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &Box3D, r: &Residual) -> Box3D {
    let diag = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    Box3D {
        cx: anchor.cx + r[0] * diag,
        cy: anchor.cy + r[1] * diag,
        cz: anchor.cz + r[2] * anchor.h,
        l: anchor.l * r[3].exp(),
        w: anchor.w * r[4].exp(),
        h: anchor.h * r[5].exp(),
        yaw: normalize_angle(anchor.yaw + r[6]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// (l, w, h) in meters.
    pub size: [f64; 3],
    pub z_center: f64,
    pub yaw_set: Vec<f64>,
    /// Input-grid cells per anchor location along x and y.
    pub bev_stride: u32,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            size: [3.9, 1.6, 1.56],
            z_center: -1.0,
            yaw_set: vec![0.0, PI / 2.0],
            bev_stride: 8,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.yaw_set.is_empty() {
            return Err(Error::InvalidConfig("anchor yaw_set is empty".into()));
        }
        if self.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "anchor size must be positive, got {:?}",
                self.size
            )));
        }
        if self.bev_stride == 0 {
            return Err(Error::InvalidConfig("anchor bev_stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn per_location(&self) -> usize {
        self.yaw_set.len()
    }
}

/// Tiles anchors over an `nx x ny` BEV map: y outer, x inner, yaw innermost.
pub fn generate_anchors(
    cfg: &AnchorConfig,
    bev_dims: (usize, usize),
    voxel_cfg: &VoxelizationConfig,
) -> Result<Vec<Box3D>> {
    cfg.validate()?;
    let (nx, ny) = bev_dims;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidConfig(format!(
            "BEV dims must be positive, got {nx}x{ny}"
        )));
    }
    let stride = f64::from(cfg.bev_stride);
    let step_x = voxel_cfg.voxel_size[0] * stride;
    let step_y = voxel_cfg.voxel_size[1] * stride;
    let mut anchors = Vec::with_capacity(nx * ny * cfg.yaw_set.len());
    for iy in 0..ny {
        let y = voxel_cfg.range_min[1] + (iy as f64 + 0.5) * step_y;
        for ix in 0..nx {
            let x = voxel_cfg.range_min[0] + (ix as f64 + 0.5) * step_x;
            for &yaw in &cfg.yaw_set {
                anchors.push(Box3D {
                    cx: x,
                    cy: y,
                    cz: cfg.z_center,
                    l: cfg.size[0],
                    w: cfg.size[1],
                    h: cfg.size[2],
                    yaw: normalize_angle(yaw),
                });
            }
        }
    }
    Ok(anchors)
}

/// Parses one `cx cy cz l w h yaw [score]` line.
pub fn parse_box_line(line: &str, line_no: usize) -> Result<(Box3D, Option<f64>)> {
    let vals = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
    if vals.len() != 7 && vals.len() != 8 {
        return Err(Error::Parse {
            line: line_no,
            reason: format!("expected 7 or 8 fields, found {}", vals.len()),
        });
    }
    let b = Box3D::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], vals[6])
        .map_err(|e| Error::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
    Ok((b, vals.get(7).copied()))
}

/// Parses a whole box text file. Blank lines and `#` comments are skipped.
pub fn parse_boxes(text: &str) -> Result<Vec<(Box3D, Option<f64>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_box_line(l, i + 1))
        .collect()
}

pub fn format_scored_boxes(boxes: &[ScoredBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&b.bbox.to_line(Some(b.score)));
        out.push('\n');
    }
    out
}

pub fn format_boxes(boxes: &[Box3D]) -> String {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&b.to_line(None));
        out.push('\n');
    }
    out
}
