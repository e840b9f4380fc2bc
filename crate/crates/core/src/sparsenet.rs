//! Sparse 3D backbone, BEV backbone and RPN heads (inference only).
//!
//! Batch norm is assumed folded into the conv weights and biases. Layer
//! weights use the layouts `C_out x C_in x 3 x 3 x 3` (3D, kernel axes i, j,
//! k) and `C_out x C_in x kx x ky` (2D).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{decode_box, nms_top_k, Box3D, IouKind, ScoredBox};
use crate::params::{relu, sigmoid, DenseLayer, Initializer, ParamBundle, Tensor, TensorLookup};
use crate::voxelizer::{BevMap, SparseVoxelGrid, VoxelCoord, VoxelizationConfig};

const KERNEL_VOLUME: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Outputs only at input-active sites.
    Submanifold,
    /// Outputs at `floor(coord / stride)` of every active input.
    Regular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: u32,
    pub mode: ConvMode,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3dLayer {
    pub fn init(name: &str, c_in: usize, c_out: usize, stride: u32, mode: ConvMode, init: &mut Initializer) -> Self {
        let fan_in = c_in * KERNEL_VOLUME;
        Conv3dLayer {
            name: name.to_string(),
            c_in,
            c_out,
            stride,
            mode,
            weights: init.uniform(c_out * fan_in, fan_in),
            bias: init.uniform(c_out, fan_in),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, 3, 3, 3]
    }

    /// Weights re-laid out as `[offset][c_in][c_out]` for the inner loop.
    fn packed(&self) -> Vec<f32> {
        let mut packed = vec![0.0; self.weights.len()];
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for off in 0..KERNEL_VOLUME {
                    packed[(off * self.c_in + ci) * self.c_out + co] =
                        self.weights[(co * self.c_in + ci) * KERNEL_VOLUME + off];
                }
            }
        }
        packed
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.c_out * self.c_in * KERNEL_VOLUME {
            return Err(Error::shape(format!("{} weights", self.name), self.c_out * self.c_in * KERNEL_VOLUME, self.weights.len()));
        }
        if self.bias.len() != self.c_out {
            return Err(Error::shape(format!("{} bias", self.name), self.c_out, self.bias.len()));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::InvalidConfig(format!("{}: stride must be 1 or 2", self.name)));
        }
        if self.mode == ConvMode::Submanifold && self.stride != 1 {
            return Err(Error::InvalidConfig(format!("{}: submanifold layers have stride 1", self.name)));
        }
        Ok(())
    }
}

fn kernel_offset(off: usize) -> [i32; 3] {
    [(off / 9) as i32 - 1, ((off / 3) % 3) as i32 - 1, (off % 3) as i32 - 1]
}

/// Sparse 3D convolution with a 3x3x3 kernel followed by ReLU.
///
/// Output site `o` reads input sites `stride * o + d`, `d` in {-1, 0, 1}^3.
/// Output coordinates are sorted lexicographically.
pub fn sparse_conv3d(grid: &SparseVoxelGrid, layer: &Conv3dLayer) -> Result<SparseVoxelGrid> {
    layer.validate()?;
    if grid.channels() != layer.c_in {
        return Err(Error::shape(format!("{} input channels", layer.name), layer.c_in, grid.channels()));
    }
    let s = layer.stride;
    let mut out_coords: Vec<VoxelCoord> = match layer.mode {
        ConvMode::Submanifold => grid.coords().to_vec(),
        ConvMode::Regular => grid
            .coords()
            .iter()
            .map(|c| VoxelCoord::new(c.i / s, c.j / s, c.k / s))
            .collect(),
    };
    out_coords.sort_unstable();
    out_coords.dedup();

    let packed = layer.packed();
    let in_dims = grid.dims();
    let (c_in, c_out) = (layer.c_in, layer.c_out);
    let mut features = vec![0.0f32; out_coords.len() * c_out];
    features
        .par_chunks_mut(c_out.max(1))
        .zip(out_coords.par_iter())
        .for_each(|(acc, o)| {
            acc.copy_from_slice(&layer.bias);
            let base = VoxelCoord::new(o.i * s, o.j * s, o.k * s);
            for off in 0..KERNEL_VOLUME {
                let Some(src) = base.offset(kernel_offset(off), in_dims) else {
                    continue;
                };
                let Some(row) = grid.lookup(src) else {
                    continue;
                };
                let x = grid.feature(row);
                let w_off = &packed[off * c_in * c_out..(off + 1) * c_in * c_out];
                for (ci, &v) in x.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let w = &w_off[ci * c_out..(ci + 1) * c_out];
                    for (a, wv) in acc.iter_mut().zip(w) {
                        *a += v * wv;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a = relu(*a);
            }
        });
    SparseVoxelGrid::new(grid.config().clone(), grid.stride() * s, c_out, out_coords, features)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2dLayer {
    pub fn init(name: &str, c_in: usize, c_out: usize, stride: usize, init: &mut Initializer) -> Self {
        let fan_in = c_in * 9;
        Conv2dLayer {
            name: name.to_string(),
            c_in,
            c_out,
            kernel: 3,
            stride,
            weights: init.uniform(c_out * fan_in, fan_in),
            bias: init.uniform(c_out, fan_in),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.kernel, self.kernel]
    }

    fn packed(&self) -> Vec<f32> {
        let kk = self.kernel * self.kernel;
        let mut packed = vec![0.0; self.weights.len()];
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for off in 0..kk {
                    packed[(off * self.c_in + ci) * self.c_out + co] = self.weights[(co * self.c_in + ci) * kk + off];
                }
            }
        }
        packed
    }
}

/// Zero-padded 2D convolution (`pad = kernel / 2`) followed by ReLU.
pub fn conv2d(input: &BevMap, layer: &Conv2dLayer) -> Result<BevMap> {
    if input.channels != layer.c_in {
        return Err(Error::shape(format!("{} input channels", layer.name), layer.c_in, input.channels));
    }
    let k = layer.kernel;
    if layer.weights.len() != layer.c_out * layer.c_in * k * k || layer.bias.len() != layer.c_out {
        return Err(Error::shape(format!("{} weights", layer.name), layer.c_out * layer.c_in * k * k, layer.weights.len()));
    }
    let pad = (k / 2) as isize;
    let s = layer.stride;
    let (nx, ny) = (input.nx.div_ceil(s), input.ny.div_ceil(s));
    let (c_in, c_out) = (layer.c_in, layer.c_out);
    let packed = layer.packed();
    let mut out = BevMap::zeros(nx, ny, c_out);
    out.data
        .par_chunks_mut((ny * c_out).max(1))
        .enumerate()
        .for_each(|(x, row)| {
            for (y, acc) in row.chunks_exact_mut(c_out).enumerate() {
                acc.copy_from_slice(&layer.bias);
                for kx in 0..k {
                    let ix = (x * s) as isize + kx as isize - pad;
                    if ix < 0 || ix >= input.nx as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (y * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= input.ny as isize {
                            continue;
                        }
                        let px = input.pixel(ix as usize, iy as usize);
                        let w_off = &packed[(kx * k + ky) * c_in * c_out..(kx * k + ky + 1) * c_in * c_out];
                        for (ci, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let w = &w_off[ci * c_out..(ci + 1) * c_out];
                            for (a, wv) in acc.iter_mut().zip(w) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                for a in acc.iter_mut() {
                    *a = relu(*a);
                }
            }
        });
    Ok(out)
}

/// Nearest-neighbor 2x upsampling cropped to `(nx, ny)`.
pub fn upsample_nearest(input: &BevMap, nx: usize, ny: usize) -> BevMap {
    let mut out = BevMap::zeros(nx, ny, input.channels);
    for x in 0..nx {
        for y in 0..ny {
            let src = input.pixel((x / 2).min(input.nx - 1), (y / 2).min(input.ny - 1));
            let start = (x * ny + y) * input.channels;
            out.data[start..start + input.channels].copy_from_slice(src);
        }
    }
    out
}

/// Channel concatenation of two maps with equal spatial dims.
pub fn concat_channels(a: &BevMap, b: &BevMap) -> Result<BevMap> {
    if (a.nx, a.ny) != (b.nx, b.ny) {
        return Err(Error::shape("concat spatial dims", a.nx * a.ny, b.nx * b.ny));
    }
    let mut out = BevMap::zeros(a.nx, a.ny, a.channels + b.channels);
    for x in 0..a.nx {
        for y in 0..a.ny {
            let start = (x * a.ny + y) * out.channels;
            out.data[start..start + a.channels].copy_from_slice(a.pixel(x, y));
            out.data[start + a.channels..start + out.channels].copy_from_slice(b.pixel(x, y));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Filter numbers of the four 3D stages.
    pub stage_channels: [usize; 4],
    /// Channels of the two BEV blocks.
    pub block_channels: [usize; 2],
    /// Conv layers per BEV block.
    pub block_layers: [usize; 2],
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::kitti()
    }
}

impl ArchConfig {
    pub fn kitti() -> Self {
        ArchConfig {
            input_channels: crate::voxelizer::INPUT_CHANNELS,
            stage_channels: [16, 32, 48, 64],
            block_channels: [64, 128],
            block_layers: [5, 5],
        }
    }

    pub fn waymo() -> Self {
        ArchConfig {
            block_channels: [128, 256],
            ..Self::kitti()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stage_channels.contains(&0) || self.block_channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be >= 1".into()));
        }
        if self.block_layers.contains(&0) {
            return Err(Error::InvalidConfig("each BEV block needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn fused_channels(&self) -> usize {
        self.block_channels[0] + self.block_channels[1]
    }
}

/// Cumulative strides of the four 3D stages.
pub const STAGE_STRIDES: [u32; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub seed: u64,
    pub arch: ArchConfig,
    /// Two layers per stage: stride layer then submanifold layer.
    pub backbone3d: Vec<Conv3dLayer>,
    pub block1: Vec<Conv2dLayer>,
    pub block2: Vec<Conv2dLayer>,
    pub rpn_cls: DenseLayer,
    pub rpn_reg: DenseLayer,
}

const NETWORK_STREAM: u64 = 1;

impl NetworkParams {
    /// Seeded uniform init. `bev_depth` is the number of z-slices at stride 8.
    pub fn init(seed: u64, arch: &ArchConfig, bev_depth: usize, anchors_per_location: usize) -> Result<Self> {
        arch.validate()?;
        let mut init = Initializer::new(seed, NETWORK_STREAM);
        let mut backbone3d = Vec::with_capacity(8);
        let mut c_prev = arch.input_channels;
        for (stage, &c) in arch.stage_channels.iter().enumerate() {
            let (stride, mode) = if stage == 0 { (1, ConvMode::Submanifold) } else { (2, ConvMode::Regular) };
            backbone3d.push(Conv3dLayer::init(&format!("backbone3d.stage{}.down", stage + 1), c_prev, c, stride, mode, &mut init));
            backbone3d.push(Conv3dLayer::init(&format!("backbone3d.stage{}.subm", stage + 1), c, c, 1, ConvMode::Submanifold, &mut init));
            c_prev = c;
        }
        let bev_in = arch.stage_channels[3] * bev_depth;
        let [c1, c2] = arch.block_channels;
        let block1 = (0..arch.block_layers[0])
            .map(|i| Conv2dLayer::init(&format!("backbone2d.block1.conv{}", i + 1), if i == 0 { bev_in } else { c1 }, c1, 1, &mut init))
            .collect();
        let block2 = (0..arch.block_layers[1])
            .map(|i| {
                let (c_in, stride) = if i == 0 { (c1, 2) } else { (c2, 1) };
                Conv2dLayer::init(&format!("backbone2d.block2.conv{}", i + 1), c_in, c2, stride, &mut init)
            })
            .collect();
        let fused = arch.fused_channels();
        Ok(NetworkParams {
            seed,
            arch: arch.clone(),
            backbone3d,
            block1,
            block2,
            rpn_cls: DenseLayer::init("rpn.cls", fused, anchors_per_location, &mut init),
            rpn_reg: DenseLayer::init("rpn.reg", fused, 7 * anchors_per_location, &mut init),
        })
    }

    pub fn anchors_per_location(&self) -> usize {
        self.rpn_cls.c_out
    }

    pub fn bev_depth(&self) -> usize {
        self.block1[0].c_in / self.arch.stage_channels[3]
    }

    pub fn to_tensors(&self, bundle: &mut ParamBundle) {
        for l in &self.backbone3d {
            bundle.push(Tensor::new(format!("{}.weight", l.name), l.weight_shape(), l.weights.clone()));
            bundle.push(Tensor::new(format!("{}.bias", l.name), vec![l.c_out], l.bias.clone()));
        }
        for l in self.block1.iter().chain(&self.block2) {
            bundle.push(Tensor::new(format!("{}.weight", l.name), l.weight_shape(), l.weights.clone()));
            bundle.push(Tensor::new(format!("{}.bias", l.name), vec![l.c_out], l.bias.clone()));
        }
        self.rpn_cls.to_tensors(bundle);
        self.rpn_reg.to_tensors(bundle);
    }

    /// Rebuilds params with the architecture's declared shapes from a bundle.
    pub fn from_tensors(
        seed: u64,
        arch: &ArchConfig,
        bev_depth: usize,
        anchors_per_location: usize,
        lookup: &TensorLookup<'_>,
    ) -> Result<Self> {
        // seeded init gives the declared shapes; every tensor is then overwritten
        let mut p = NetworkParams::init(seed, arch, bev_depth, anchors_per_location)?;
        for l in &mut p.backbone3d {
            l.weights = lookup.take(&format!("{}.weight", l.name), &l.weight_shape())?;
            l.bias = lookup.take(&format!("{}.bias", l.name), &[l.c_out])?;
        }
        for l in p.block1.iter_mut().chain(p.block2.iter_mut()) {
            l.weights = lookup.take(&format!("{}.weight", l.name), &l.weight_shape())?;
            l.bias = lookup.take(&format!("{}.bias", l.name), &[l.c_out])?;
        }
        let fused = arch.fused_channels();
        p.rpn_cls = DenseLayer::from_tensors("rpn.cls", fused, anchors_per_location, lookup)?;
        p.rpn_reg = DenseLayer::from_tensors("rpn.reg", fused, 7 * anchors_per_location, lookup)?;
        Ok(p)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut bundle = ParamBundle::new(self.seed);
        self.to_tensors(&mut bundle);
        bundle.save(dir)
    }

    pub fn load(dir: &Path, arch: &ArchConfig, bev_depth: usize, anchors_per_location: usize) -> Result<Self> {
        let bundle = ParamBundle::load(dir)?;
        Self::from_tensors(bundle.seed, arch, bev_depth, anchors_per_location, &bundle.lookup())
    }
}

/// Runs the four 3D stages; returns one grid per stage (strides 1, 2, 4, 8).
pub fn backbone3d_forward(grid: &SparseVoxelGrid, params: &NetworkParams) -> Result<Vec<SparseVoxelGrid>> {
    if grid.stride() != 1 {
        return Err(Error::InvalidGrid(format!("backbone input must have stride 1, got {}", grid.stride())));
    }
    let mut stages = Vec::with_capacity(4);
    let mut x = grid.clone();
    for pair in params.backbone3d.chunks_exact(2) {
        x = sparse_conv3d(&x, &pair[0])?;
        x = sparse_conv3d(&x, &pair[1])?;
        stages.push(x.clone());
    }
    Ok(stages)
}

/// Two top-down blocks, upsample block 2 and concatenate with block 1.
pub fn backbone2d_forward(bev: &BevMap, params: &NetworkParams) -> Result<BevMap> {
    let mut b1 = bev.clone();
    for l in &params.block1 {
        b1 = conv2d(&b1, l)?;
    }
    let mut b2 = b1.clone();
    for l in &params.block2 {
        b2 = conv2d(&b2, l)?;
    }
    let up = upsample_nearest(&b2, b1.nx, b1.ny);
    concat_channels(&b1, &up)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnConfig {
    pub nms_threshold: f64,
    pub top_k: usize,
    pub nms_kind: IouKind,
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            nms_threshold: 0.7,
            top_k: 100,
            nms_kind: IouKind::Bev,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    /// One logit per anchor.
    pub logits: Vec<f32>,
    /// One residual per anchor.
    pub residuals: Vec<[f32; 7]>,
    /// Post-NMS proposals, descending score.
    pub proposals: Vec<ScoredBox>,
}

/// Sibling 1x1 heads over the fused map, decode, sigmoid, BEV NMS and top-k.
///
/// Anchors must follow the `generate_anchors` layout over the map
/// (y outer, x inner, yaw innermost). Decoded boxes that are not finite or
/// have collapsed dimensions are dropped before NMS.
pub fn rpn_forward(features: &BevMap, anchors: &[Box3D], params: &NetworkParams, cfg: &RpnConfig) -> Result<ProposalSet> {
    let a = params.anchors_per_location();
    let expected = features.nx * features.ny * a;
    if anchors.len() != expected {
        return Err(Error::shape("rpn anchors", expected, anchors.len()));
    }
    let per_pixel: Vec<(Vec<f32>, Vec<f32>)> = (0..features.nx * features.ny)
        .into_par_iter()
        .map(|pix| {
            let (y, x) = (pix / features.nx, pix % features.nx);
            let f = features.pixel(x, y);
            let mut cls = vec![0.0; a];
            let mut reg = vec![0.0; 7 * a];
            params.rpn_cls.forward(f, &mut cls)?;
            params.rpn_reg.forward(f, &mut reg)?;
            Ok((cls, reg))
        })
        .collect::<Result<_>>()?;
    let mut logits = Vec::with_capacity(expected);
    let mut residuals = Vec::with_capacity(expected);
    for (cls, reg) in per_pixel {
        logits.extend_from_slice(&cls);
        residuals.extend(reg.chunks_exact(7).map(|r| std::array::from_fn(|i| r[i])));
    }
    let mut candidates = Vec::new();
    for (idx, (anchor, r)) in anchors.iter().zip(&residuals).enumerate() {
        let r64 = r.map(f64::from);
        let b = decode_box(anchor, &r64);
        if b.validate().is_err() {
            continue;
        }
        let score = sigmoid(f64::from(logits[idx]));
        candidates.push(ScoredBox::new(b, score));
    }
    let kept = nms_top_k(&candidates, cfg.nms_threshold, cfg.nms_kind, cfg.top_k);
    let proposals = kept.into_iter().map(|i| candidates[i]).collect();
    Ok(ProposalSet {
        logits,
        residuals,
        proposals,
    })
}

/// BEV depth (z-slices) of the stride-8 stage for a voxelization config.
pub fn bev_depth_for(cfg: &VoxelizationConfig) -> usize {
    cfg.dims_at_stride(STAGE_STRIDES[3])[2] as usize
}
