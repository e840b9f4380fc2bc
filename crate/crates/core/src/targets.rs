//! Target assignment and loss evaluators for both detection stages.
//!
//! Everything here is a pure function of its inputs; there is no optimizer.
//! Probabilities enter the logarithms floored at [`PROB_FLOOR`], so a
//! prediction of exactly 0 or 1 never produces an infinite loss while a
//! perfect prediction still scores exactly zero.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{encode_box, iou_3d, iou_bev, Box3D, Residual};

pub const PROB_FLOOR: f64 = 1e-7;

fn safe_ln(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HuberParams {
    pub delta: f64,
}

impl Default for HuberParams {
    fn default() -> Self {
        HuberParams { delta: 1.0 / 9.0 }
    }
}

/// `-a (1-p)^g ln p` for a positive, `-(1-a) p^g ln(1-p)` for a negative.
pub fn focal_loss(p: f64, positive: bool, params: &FocalParams) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if positive {
        -params.alpha * (1.0 - p).powf(params.gamma) * safe_ln(p)
    } else {
        -(1.0 - params.alpha) * p.powf(params.gamma) * safe_ln(1.0 - p)
    }
}

/// Binary cross-entropy against a soft target `t` in `[0, 1]`.
pub fn bce_loss(p: f64, t: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let mut loss = 0.0;
    if t > 0.0 {
        loss -= t * safe_ln(p);
    }
    if t < 1.0 {
        loss -= (1.0 - t) * safe_ln(1.0 - p);
    }
    loss
}

/// Summed over components: `0.5 e^2 / d` inside `|e| <= d`, `|e| - 0.5 d` outside.
pub fn huber_loss(pred: &Residual, target: &Residual, params: &HuberParams) -> f64 {
    let d = params.delta;
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e <= d {
                0.5 * e * e / d
            } else {
                e - 0.5 * d
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(cls: f64, reg: f64) -> Self {
        LossBreakdown { cls, reg, total: cls + reg }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpnAssignConfig {
    pub fg_threshold: f64,
    pub bg_threshold: f64,
}

impl Default for RpnAssignConfig {
    fn default() -> Self {
        RpnAssignConfig {
            fg_threshold: 0.6,
            bg_threshold: 0.45,
        }
    }
}

pub const LABEL_IGNORE: i8 = -1;
pub const LABEL_BG: i8 = 0;
pub const LABEL_FG: i8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnTargets {
    pub labels: Vec<i8>,
    /// Regression target per anchor; zeros unless foreground.
    pub reg_targets: Vec<Residual>,
    pub num_fg: usize,
}

/// Per-anchor labels by max BEV IoU, with every gt claiming its best anchor
/// (when that anchor overlaps it at all).
pub fn assign_rpn_targets(anchors: &[Box3D], gts: &[Box3D], cfg: &RpnAssignConfig) -> RpnTargets {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut gt_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou_bev(anchor, gt);
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = Some(g);
            }
            if v > gt_best[g].0 {
                gt_best[g] = (v, Some(a));
            }
        }
    }
    let mut labels: Vec<i8> = best_iou
        .iter()
        .map(|&v| {
            if v >= cfg.fg_threshold {
                LABEL_FG
            } else if v < cfg.bg_threshold {
                LABEL_BG
            } else {
                LABEL_IGNORE
            }
        })
        .collect();
    for (g, &(_, a)) in gt_best.iter().enumerate() {
        if let Some(a) = a {
            labels[a] = LABEL_FG;
            best_gt[a] = Some(g);
        }
    }
    let reg_targets = (0..n)
        .map(|a| match (labels[a], best_gt[a]) {
            (LABEL_FG, Some(g)) => encode_box(&anchors[a], &gts[g]),
            _ => [0.0; 7],
        })
        .collect();
    let num_fg = labels.iter().filter(|&&l| l == LABEL_FG).count();
    RpnTargets {
        labels,
        reg_targets,
        num_fg,
    }
}

/// First-stage loss: focal over labeled anchors plus Huber over foreground
/// anchors, both divided by `max(N_fg, 1)`.
pub fn rpn_loss(
    probs: &[f64],
    residuals: &[Residual],
    targets: &RpnTargets,
    focal: &FocalParams,
    huber: &HuberParams,
) -> Result<LossBreakdown> {
    let n = targets.labels.len();
    if probs.len() != n {
        return Err(Error::shape("rpn probabilities", n, probs.len()));
    }
    if residuals.len() != n || targets.reg_targets.len() != n {
        return Err(Error::shape("rpn residuals", n, residuals.len().min(targets.reg_targets.len())));
    }
    let (mut cls, mut reg) = (0.0, 0.0);
    for (i, &label) in targets.labels.iter().enumerate() {
        match label {
            LABEL_FG => {
                cls += focal_loss(probs[i], true, focal);
                reg += huber_loss(&residuals[i], &targets.reg_targets[i], huber);
            }
            LABEL_BG => cls += focal_loss(probs[i], false, focal),
            _ => {}
        }
    }
    let norm = targets.num_fg.max(1) as f64;
    Ok(LossBreakdown::new(cls / norm, reg / norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadLossConfig {
    pub theta_h: f64,
    pub theta_l: f64,
    pub theta_reg: f64,
    pub num_samples: usize,
    pub fg_fraction: f64,
}

impl Default for HeadLossConfig {
    fn default() -> Self {
        HeadLossConfig {
            theta_h: 0.75,
            theta_l: 0.25,
            theta_reg: 0.55,
            num_samples: 128,
            fg_fraction: 0.5,
        }
    }
}

impl HeadLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.theta_l && self.theta_l < self.theta_h && self.theta_h <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= theta_l < theta_h <= 1, got {} and {}",
                self.theta_l, self.theta_h
            )));
        }
        if !(self.theta_reg > 0.0 && self.theta_reg < 1.0) {
            return Err(Error::InvalidConfig(format!("theta_reg must be in (0, 1), got {}", self.theta_reg)));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::InvalidConfig(format!("fg_fraction must be in [0, 1], got {}", self.fg_fraction)));
        }
        Ok(())
    }
}

/// IoU-guided confidence target: 0 up to `theta_l`, linear ramp, 1 from `theta_h`.
pub fn confidence_target(iou: f64, cfg: &HeadLossConfig) -> f64 {
    if iou <= cfg.theta_l {
        0.0
    } else if iou >= cfg.theta_h {
        1.0
    } else {
        (iou - cfg.theta_l) / (cfg.theta_h - cfg.theta_l)
    }
}

/// Second-stage loss: BCE against [`confidence_target`] for every RoI, Huber
/// for RoIs with `IoU >= theta_reg`, both summed and divided by the sample count.
pub fn head_loss(
    confidences: &[f64],
    residuals: &[Residual],
    ious: &[f64],
    reg_targets: &[Residual],
    cfg: &HeadLossConfig,
    huber: &HuberParams,
) -> Result<LossBreakdown> {
    let n = confidences.len();
    for (what, len) in [("head residuals", residuals.len()), ("head ious", ious.len()), ("head targets", reg_targets.len())] {
        if len != n {
            return Err(Error::shape(what, n, len));
        }
    }
    let (mut cls, mut reg) = (0.0, 0.0);
    for i in 0..n {
        cls += bce_loss(confidences[i], confidence_target(ious[i], cfg));
        if ious[i] >= cfg.theta_reg {
            reg += huber_loss(&residuals[i], &reg_targets[i], huber);
        }
    }
    let norm = n.max(1) as f64;
    Ok(LossBreakdown::new(cls / norm, reg / norm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRoi {
    /// Index into the proposal list.
    pub index: usize,
    pub roi: Box3D,
    /// Best 3D IoU against any gt, 0 without gts.
    pub iou: f64,
    pub gt: Option<usize>,
    /// Residual from the RoI to its best gt; zeros without a match.
    pub target: Residual,
}

/// Draws up to `num_samples` RoIs, positives (`IoU > theta_reg`) first.
///
/// Positives are capped at `fg_fraction * num_samples` and the rest filled
/// with negatives; if negatives run short the remaining slots go back to
/// positives. Both pools are sampled without replacement.
pub fn sample_rois(proposals: &[Box3D], gts: &[Box3D], cfg: &HeadLossConfig, seed: u64) -> Vec<SampledRoi> {
    let matched: Vec<SampledRoi> = proposals
        .iter()
        .enumerate()
        .map(|(index, roi)| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(g, gt)| (iou_3d(roi, gt), g))
                .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            let (iou, gt) = match best {
                Some((v, g)) if v > 0.0 => (v, Some(g)),
                _ => (0.0, None),
            };
            SampledRoi {
                index,
                roi: *roi,
                iou,
                gt,
                target: gt.map_or([0.0; 7], |g| encode_box(roi, &gts[g])),
            }
        })
        .collect();
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..matched.len()).partition(|&i| matched[i].iou > cfg.theta_reg);

    let total = cfg.num_samples;
    let fg_cap = (total as f64 * cfg.fg_fraction).floor() as usize;
    let mut n_pos = pos.len().min(fg_cap);
    let n_neg = neg.len().min(total - n_pos);
    n_pos = pos.len().min(total - n_neg);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos_pick, _) = pos.partial_shuffle(&mut rng, n_pos);
    let (neg_pick, _) = neg.partial_shuffle(&mut rng, n_neg);
    pos_pick.iter().chain(neg_pick.iter()).map(|&i| matched[i].clone()).collect()
}

/// Inputs for an offline loss evaluation, as read by the `losses eval` command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossBundle {
    pub rpn: Option<RpnLossInput>,
    pub head: Option<HeadLossInput>,
    pub focal: FocalParams,
    pub huber: HuberParams,
    pub head_config: HeadLossConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpnLossInput {
    pub probs: Vec<f64>,
    pub residuals: Vec<Residual>,
    pub labels: Vec<i8>,
    pub reg_targets: Vec<Residual>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadLossInput {
    pub confidences: Vec<f64>,
    pub residuals: Vec<Residual>,
    pub ious: Vec<f64>,
    pub reg_targets: Vec<Residual>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rpn: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<LossBreakdown>,
}

pub fn evaluate_bundle(bundle: &LossBundle) -> Result<LossReport> {
    bundle.head_config.validate()?;
    let rpn = bundle
        .rpn
        .as_ref()
        .map(|r| {
            if let Some(bad) = r.labels.iter().find(|l| !(-1..=1).contains(*l)) {
                return Err(Error::InvalidConfig(format!("rpn label {bad} is not -1, 0 or 1")));
            }
            let targets = RpnTargets {
                labels: r.labels.clone(),
                reg_targets: r.reg_targets.clone(),
                num_fg: r.labels.iter().filter(|&&l| l == LABEL_FG).count(),
            };
            rpn_loss(&r.probs, &r.residuals, &targets, &bundle.focal, &bundle.huber)
        })
        .transpose()?;
    let head = bundle
        .head
        .as_ref()
        .map(|h| head_loss(&h.confidences, &h.residuals, &h.ious, &h.reg_targets, &bundle.head_config, &bundle.huber))
        .transpose()?;
    Ok(LossReport { rpn, head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FOCAL: FocalParams = FocalParams { alpha: 0.25, gamma: 2.0 };
    const HUBER: HuberParams = HuberParams { delta: 1.0 / 9.0 };

    fn r(v: [f64; 7]) -> Residual {
        v
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal_loss(1.0, true, &FOCAL), 0.0);
        assert!((focal_loss(0.5, true, &FOCAL) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((focal_loss(0.5, true, &FOCAL) - 0.043322).abs() < 1e-6);
        let ce = FocalParams { alpha: 1.0, gamma: 0.0 };
        for p in [0.01, 0.3, 0.9] {
            assert!((focal_loss(p, true, &ce) + f64::ln(p)).abs() < 1e-12);
        }
        assert!(focal_loss(0.0, true, &FOCAL).is_finite());
    }

    #[test]
    fn huber_examples() {
        let z = [0.0; 7];
        assert_eq!(huber_loss(&z, &z, &HUBER), 0.0);
        let d = HUBER.delta;
        let at = huber_loss(&r([d, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &z, &HUBER);
        assert!((at - 0.5 * d).abs() < 1e-15);
        let two = huber_loss(&r([2.0 * d, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &z, &HUBER);
        assert!((two - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn huber_slope_is_continuous() {
        let d = HUBER.delta;
        let f = |e: f64| huber_loss(&r([e, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &[0.0; 7], &HUBER);
        let h = 1e-9;
        let left = (f(d) - f(d - h)) / h;
        let right = (f(d + h) - f(d)) / h;
        assert!((left - 1.0).abs() < 1e-5 && (right - 1.0).abs() < 1e-5, "{left} {right}");
    }

    #[test]
    fn confidence_target_examples() {
        let cfg = HeadLossConfig::default();
        let cases = [(0.0, 0.0), (0.2, 0.0), (0.25, 0.0), (0.5, 0.5), (0.75, 1.0), (0.8, 1.0), (1.0, 1.0)];
        for (iou, want) in cases {
            assert_eq!(confidence_target(iou, &cfg), want, "iou {iou}");
        }
        for knot in [0.25, 0.75] {
            let l = confidence_target(knot - 1e-13, &cfg);
            let u = confidence_target(knot + 1e-13, &cfg);
            assert!((l - u).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_examples() {
        let a0 = Box3D::new([0.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap();
        let a1 = Box3D::new([20.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap();
        let a2 = Box3D::new([40.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap();
        let anchors = [a0, a1, a2];

        let t = assign_rpn_targets(&anchors, &[a1], &RpnAssignConfig::default());
        assert_eq!(t.labels, vec![LABEL_BG, LABEL_FG, LABEL_BG]);
        assert_eq!(t.reg_targets[1], [0.0; 7]);
        assert_eq!(t.num_fg, 1);

        let none = assign_rpn_targets(&anchors, &[], &RpnAssignConfig::default());
        assert_eq!(none.num_fg, 0);
        assert!(none.labels.iter().all(|&l| l == LABEL_BG));

        // a small gt overlapping a0 far below 0.45 still claims it
        let gt = Box3D::new([1.5, 0.5, -1.0], [1.0, 0.6, 1.5], 0.3).unwrap();
        assert!(iou_bev(&a0, &gt) < 0.45);
        let t = assign_rpn_targets(&anchors, &[gt], &RpnAssignConfig::default());
        assert_eq!(t.labels[0], LABEL_FG);
        assert_eq!(t.reg_targets[0], encode_box(&a0, &gt));
    }

    #[test]
    fn rpn_loss_two_anchor_fixture() {
        // anchor 0 foreground: p = 0.8, t* = (0.1, 0, .., 0), delta = (0.2, 0, 0, 0, 0, 0, 0.05)
        //   focal = -0.25 * 0.2^2 * ln 0.8            = 0.0022314355131420973
        //   huber: e = 0.1 <= 1/9 -> 0.5 * 0.01 * 9    = 0.045
        //          e = 0.05       -> 0.5 * 0.0025 * 9  = 0.01125
        // anchor 1 background: p = 0.3
        //   focal = -0.75 * 0.3^2 * ln 0.7            = 0.02407555871586444
        // N_fg = 1: cls = 0.02630699422900654, reg = 0.05625
        let targets = RpnTargets {
            labels: vec![LABEL_FG, LABEL_BG],
            reg_targets: vec![r([0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), [0.0; 7]],
            num_fg: 1,
        };
        let residuals = [r([0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.05]), [9.0; 7]];
        let l = rpn_loss(&[0.8, 0.3], &residuals, &targets, &FOCAL, &HUBER).unwrap();
        assert!((l.cls - 0.02630699422900654).abs() < 1e-9);
        assert!((l.reg - 0.05625).abs() < 1e-9);
        assert!((l.total - 0.08255699422900654).abs() < 1e-9);

        let perfect = rpn_loss(&[1.0, 0.0], &[targets.reg_targets[0], [3.0; 7]], &targets, &FOCAL, &HUBER).unwrap();
        assert!(perfect.total < 1e-9);
    }

    #[test]
    fn rpn_loss_floor_and_ignore() {
        let targets = RpnTargets {
            labels: vec![LABEL_BG, LABEL_IGNORE],
            reg_targets: vec![[0.0; 7]; 2],
            num_fg: 0,
        };
        let l = rpn_loss(&[0.3, 0.99], &[[1.0; 7]; 2], &targets, &FOCAL, &HUBER).unwrap();
        assert_eq!(l.reg, 0.0);
        assert!((l.cls - focal_loss(0.3, false, &FOCAL)).abs() < 1e-15);
        assert!(rpn_loss(&[0.3], &[[1.0; 7]; 2], &targets, &FOCAL, &HUBER).is_err());
    }

    #[test]
    fn head_loss_three_roi_fixture() {
        // RoI 0: IoU 0.8 -> l* = 1, p = 0.9: BCE = -ln 0.9 = 0.10536051565782628
        //        IoU >= 0.55 -> huber, e = 0.2 > 1/9: 0.2 - 0.5/9 = 0.14444444444444446
        // RoI 1: IoU 0.5 -> l* = 0.5, p = 0.6: BCE = -(0.5 ln 0.6 + 0.5 ln 0.4) = 0.7135581778200728
        // RoI 2: IoU 0.1 -> l* = 0, p = 0.2: BCE = -ln 0.8 = 0.2231435513142097
        // sum BCE = 1.0420622447921088, N_s = 3
        // cls = 0.34735408159736963, reg = 0.048148148148148155
        let cfg = HeadLossConfig::default();
        let residuals = [r([0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), [5.0; 7], [5.0; 7]];
        let l = head_loss(&[0.9, 0.6, 0.2], &residuals, &[0.8, 0.5, 0.1], &[[0.0; 7]; 3], &cfg, &HUBER).unwrap();
        assert!((l.cls - 0.34735408159736963).abs() < 1e-9);
        assert!((l.reg - 0.048148148148148155).abs() < 1e-9);
        assert!((l.total - 0.39550222974551774).abs() < 1e-9);
    }

    #[test]
    fn head_loss_zero_and_entropy() {
        let cfg = HeadLossConfig::default();
        let t = [[0.1; 7]; 2];
        let zero = head_loss(&[1.0, 0.0], &t, &[0.9, 0.1], &t, &cfg, &HUBER).unwrap();
        assert!(zero.total < 1e-9);

        let low = head_loss(&[0.3], &[[4.0; 7]], &[0.5], &[[0.0; 7]], &cfg, &HUBER).unwrap();
        assert_eq!(low.reg, 0.0);
        let entropy = head_loss(&[0.5], &[[0.0; 7]], &[0.5], &[[0.0; 7]], &cfg, &HUBER).unwrap();
        assert!((entropy.cls - 2f64.ln()).abs() < 1e-12);
    }

    fn ring(n: usize, gt: &Box3D, shift: f64) -> Vec<Box3D> {
        (0..n)
            .map(|i| Box3D {
                cx: gt.cx + shift * (i as f64 / n as f64),
                ..*gt
            })
            .collect()
    }

    #[test]
    fn sampling_examples() {
        let cfg = HeadLossConfig::default();
        let gt = Box3D::new([10.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap();
        // 100 near-duplicates (IoU > 0.55) and 100 far away
        let mut props = ring(100, &gt, 0.5);
        props.extend(ring(100, &Box3D { cx: 40.0, ..gt }, 1.0));
        let s = sample_rois(&props, &[gt], &cfg, 7);
        assert_eq!(s.len(), 128);
        assert_eq!(s.iter().filter(|x| x.iou > cfg.theta_reg).count(), 64);
        assert_eq!(s, sample_rois(&props, &[gt], &cfg, 7));
        assert_ne!(s, sample_rois(&props, &[gt], &cfg, 8));

        let s = sample_rois(&props[100..], &[gt], &cfg, 1);
        assert_eq!(s.len(), 100);
        let neg_only = sample_rois(&ring(300, &Box3D { cx: 40.0, ..gt }, 1.0), &[gt], &cfg, 1);
        assert_eq!(neg_only.len(), 128);
        assert!(neg_only.iter().all(|x| x.iou == 0.0 && x.gt.is_none()));

        // short on negatives: positives fill the rest
        let mut few_neg = ring(150, &gt, 0.5);
        few_neg.extend(ring(10, &Box3D { cx: 40.0, ..gt }, 1.0));
        let s = sample_rois(&few_neg, &[gt], &cfg, 3);
        assert_eq!(s.len(), 128);
        assert_eq!(s.iter().filter(|x| x.iou > cfg.theta_reg).count(), 118);

        assert!(sample_rois(&[], &[gt], &cfg, 0).is_empty());
    }

    #[test]
    fn bundle_roundtrip() {
        let json = r#"{
            "rpn": {"probs": [0.8, 0.3], "residuals": [[0.2,0,0,0,0,0,0.05],[0,0,0,0,0,0,0]],
                    "labels": [1, 0], "reg_targets": [[0.1,0,0,0,0,0,0],[0,0,0,0,0,0,0]]}
        }"#;
        let bundle: LossBundle = serde_json::from_str(json).unwrap();
        let rep = evaluate_bundle(&bundle).unwrap();
        assert!((rep.rpn.unwrap().total - 0.08255699422900654).abs() < 1e-9);
        assert!(rep.head.is_none());
    }

    proptest! {
        #[test]
        fn target_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = HeadLossConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (tl, th) = (confidence_target(lo, &cfg), confidence_target(hi, &cfg));
            prop_assert!(tl <= th);
            prop_assert!((0.0..=1.0).contains(&tl) && (0.0..=1.0).contains(&th));
        }

        #[test]
        fn focal_gamma_zero_is_weighted_ce(p in 0.001f64..0.999, alpha in 0.0f64..1.0) {
            let f = FocalParams { alpha, gamma: 0.0 };
            prop_assert!((focal_loss(p, true, &f) + alpha * p.ln()).abs() < 1e-9);
            prop_assert!((focal_loss(p, false, &f) + (1.0 - alpha) * (1.0 - p).ln()).abs() < 1e-9);
        }

        #[test]
        fn losses_non_negative(
            p in proptest::collection::vec(0.0f64..=1.0, 3),
            iou in proptest::collection::vec(0.0f64..=1.0, 3),
            e in -2.0f64..2.0,
        ) {
            let cfg = HeadLossConfig::default();
            let res = [[e; 7]; 3];
            let l = head_loss(&p, &res, &iou, &[[0.0; 7]; 3], &cfg, &HUBER).unwrap();
            prop_assert!(l.cls >= 0.0 && l.reg >= 0.0 && l.total.is_finite());
            prop_assert!((l.total - l.cls - l.reg).abs() < 1e-9);
        }
    }
}
