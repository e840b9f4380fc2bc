//! Average precision with fixed recall sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom3d::{iou, score_order, Box3D, IouKind, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// 11 points `0, 0.1, ..., 1`.
    R11,
    /// 40 points `1/40, 2/40, ..., 1`.
    #[default]
    R40,
}

impl ApMode {
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            ApMode::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            ApMode::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r11" => Ok(ApMode::R11),
            "r40" => Ok(ApMode::R40),
            other => Err(Error::InvalidConfig(format!("unknown AP mode `{other}` (expected r11 or r40)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `(recall, precision)` after each detection in descending score order.
    pub curve: Vec<(f64, f64)>,
    /// Interpolated precision at each sampled recall point.
    pub sampled: Vec<(f64, f64)>,
    pub ap: f64,
    pub mode: ApMode,
    pub iou_threshold: f64,
    pub kind: IouKind,
    pub num_gt: usize,
    pub num_tp: usize,
}

/// Greedy matching in descending score: each detection takes the unmatched
/// gt with the highest IoU, provided it is at least `iou_threshold`.
/// Precision at recall `r` is the best precision reached at any recall
/// `>= r` (0 when recall `r` is never reached); AP is their mean.
pub fn evaluate_ap(dets: &[ScoredBox], gts: &[Box3D], iou_threshold: f64, mode: ApMode, kind: IouKind) -> Result<EvalResult> {
    if gts.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    if let Some(bad) = dets.iter().position(|d| !d.score.is_finite()) {
        return Err(Error::InvalidConfig(format!("detection {bad} has a non-finite score")));
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (n, &d) in score_order(&scores).iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*g])
            .map(|(g, gt)| (iou(&dets[d].bbox, gt, kind), g))
            .filter(|(v, _)| *v >= iou_threshold)
            .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                Some(a) if a.0 >= cur.0 => Some(a),
                _ => Some(cur),
            });
        if let Some((_, g)) = best {
            matched[g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (n + 1) as f64));
    }

    // suffix maximum of precision: best precision at any later (higher recall) point
    let mut best_after = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best_after[i] = best_after[i + 1].max(curve[i].1);
    }
    let sampled: Vec<(f64, f64)> = mode
        .recall_points()
        .into_iter()
        .map(|r| {
            let first = curve.partition_point(|(rec, _)| *rec < r - 1e-12);
            (r, best_after[first])
        })
        .collect();
    let ap = sampled.iter().map(|s| s.1).sum::<f64>() / sampled.len() as f64;
    Ok(EvalResult {
        curve,
        sampled,
        ap,
        mode,
        iou_threshold,
        kind,
        num_gt: gts.len(),
        num_tp: tp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::reference_ap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap()
    }

    #[test]
    fn perfect_and_empty_extremes() {
        let gts = [car(0.0, 0.0), car(10.0, 0.0), car(20.0, 5.0)];
        let dets: Vec<ScoredBox> = gts.iter().zip([0.2, 0.9, 0.5]).map(|(b, s)| ScoredBox::new(*b, s)).collect();
        for mode in [ApMode::R11, ApMode::R40] {
            for kind in [IouKind::Bev, IouKind::ThreeD] {
                assert!((evaluate_ap(&dets, &gts, 0.7, mode, kind).unwrap().ap - 1.0).abs() < 1e-12);
                assert_eq!(evaluate_ap(&[], &gts, 0.7, mode, kind).unwrap().ap, 0.0);
            }
        }
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        assert!(matches!(evaluate_ap(&[], &[], 0.7, ApMode::R11, IouKind::ThreeD), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn false_then_true_detection() {
        // the only reachable recall is 1.0, reached at precision 1/2; every
        // recall point is <= 1.0 so every sampled precision is 1/2
        let gt = car(0.0, 0.0);
        let dets = [ScoredBox::new(car(30.0, 0.0), 0.9), ScoredBox::new(gt, 0.4)];
        let r = evaluate_ap(&dets, &[gt], 0.7, ApMode::R11, IouKind::ThreeD).unwrap();
        assert_eq!(r.curve, vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!((r.ap - 0.5).abs() < 1e-12);
        let oracle = reference_ap(&dets, &[gt], 0.7, &ApMode::R11.recall_points(), IouKind::ThreeD);
        assert!((r.ap - oracle).abs() < 1e-12);
    }

    #[test]
    fn each_gt_matched_once() {
        let gt = car(0.0, 0.0);
        let dets = [ScoredBox::new(gt, 0.9), ScoredBox::new(gt, 0.8)];
        let r = evaluate_ap(&dets, &[gt], 0.7, ApMode::R40, IouKind::Bev).unwrap();
        assert_eq!(r.num_tp, 1);
        assert_eq!(r.curve[1], (1.0, 0.5));
    }

    #[test]
    fn matches_reference_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let gts: Vec<Box3D> = (0..rng.gen_range(1..6)).map(|i| car(i as f64 * 8.0, 0.0)).collect();
            let dets: Vec<ScoredBox> = (0..rng.gen_range(0..10))
                .map(|_| {
                    let g = gts[rng.gen_range(0..gts.len())];
                    let b = Box3D { cx: g.cx + rng.gen_range(-0.6..0.6), yaw: rng.gen_range(-0.2..0.2), ..g };
                    ScoredBox::new(b, rng.gen_range(0.0..1.0))
                })
                .collect();
            for mode in [ApMode::R11, ApMode::R40] {
                let got = evaluate_ap(&dets, &gts, 0.7, mode, IouKind::ThreeD).unwrap().ap;
                let want = reference_ap(&dets, &gts, 0.7, &mode.recall_points(), IouKind::ThreeD);
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_rescaling_invariant(scores in proptest::collection::vec(0.01f64..1.0, 1..8), k in 0.1f64..10.0) {
            let gts = [car(0.0, 0.0), car(10.0, 0.0)];
            let dets: Vec<ScoredBox> = scores.iter().enumerate()
                .map(|(i, s)| ScoredBox::new(car((i % 3) as f64 * 10.0, 0.1), *s))
                .collect();
            let scaled: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox::new(d.bbox, d.score * k + 3.0)).collect();
            let a = evaluate_ap(&dets, &gts, 0.7, ApMode::R40, IouKind::ThreeD).unwrap();
            let b = evaluate_ap(&scaled, &gts, 0.7, ApMode::R40, IouKind::ThreeD).unwrap();
            prop_assert_eq!(a.ap, b.ap);
            prop_assert!(a.curve.windows(2).all(|w| w[0].0 <= w[1].0));
            prop_assert!((0.0..=1.0).contains(&a.ap));
        }
    }
}
