//! Oracle-backed checks runnable from the command line.
//!
//! Each `check_*` function is self-contained, seeded and timed, and returns
//! a [`CheckResult`]; [`run_all`] executes them in criterion order.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geom3d::{format_scored_boxes, iou_bev, Box3D, IouKind, ScoredBox};
use crate::harness::config::PipelineConfig;
use crate::harness::eval::{evaluate_ap, ApMode};
use crate::harness::pipeline::{pipeline_forward, ModelParams, StageShape};
use crate::harness::synth::synth_scene;
use crate::oracle;
use crate::params::Initializer;
use crate::roipool::{
    aggregate_accelerated, aggregate_original, flop_count, pretransform, AggMode, AggregatorWeights, GroupedNeighbor,
};
use crate::sparsenet::{sparse_conv3d, Conv3dLayer, ConvMode};
use crate::targets::{
    confidence_target, head_loss, rpn_loss, FocalParams, HeadLossConfig, HuberParams, RpnTargets, LABEL_BG, LABEL_FG,
};
use crate::voxelizer::{SparseVoxelGrid, VoxelCoord, VoxelizationConfig};
use crate::vquery::{bench_query, random_grid, voxel_query, QueryBenchConfig, QuerySpec};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{:<4} [{:>2}] {:<32} {:>9.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(
    criterion: u8,
    name: &'static str,
    limit: Option<Duration>,
    f: impl FnOnce() -> Result<(bool, String)>,
) -> CheckResult {
    let start = Instant::now();
    let (ok, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; exceeded time limit of {:?}", limit.unwrap())
    };
    CheckResult {
        criterion,
        name,
        passed: ok && in_time,
        detail,
        elapsed,
        limit,
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`: relative error with an absolute floor
/// for values that are both essentially zero.
pub fn relative_error(a: f32, b: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the two aggregation paths over seeded
/// random cases. With `corrupt`, one `W_F` entry is perturbed after the split
/// so the decomposition no longer matches the full matrix.
pub fn aggregation_max_error(cases: u64, corrupt: bool) -> Result<f32> {
    let mut max_err = 0.0f32;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let k = rng.gen_range(1..=32usize);
        let c = [16, 64][rng.gen_range(0..2)];
        let c_out = [32, 64][rng.gen_range(0..2)];
        let grid = random_grid(400, 0.1, c, 2000 + case)?;
        let mut w = AggregatorWeights::init("selftest.agg", c, c_out, &mut Initializer::new(case, 7));
        if corrupt {
            w.w_f[0] += 0.5;
        }
        let groups: Vec<Vec<GroupedNeighbor>> = (0..24)
            .map(|_| {
                (0..k)
                    .map(|_| GroupedNeighbor {
                        row: rng.gen_range(0..grid.len()),
                        rel: std::array::from_fn(|_| rng.gen_range(-0.8..0.8)),
                    })
                    .collect()
            })
            .collect();
        let mut macs = 0;
        let a = aggregate_original(&grid, &groups, &w, &mut macs)?;
        let pre = pretransform(&grid, &w, &mut macs)?;
        let b = aggregate_accelerated(&grid, &pre, &groups, &w, &mut macs)?;
        for (x, y) in a.iter().zip(&b) {
            max_err = max_err.max(relative_error(*x, *y));
        }
    }
    Ok(max_err)
}

pub fn check_aggregation_equivalence() -> CheckResult {
    timed(1, "aggregator equivalence", Some(Duration::from_secs(10)), || {
        let err = aggregation_max_error(100, false)?;
        Ok((err < 1e-5, format!("100 cases, max relative error {err:.2e} (< 1e-5)")))
    })
}

pub fn check_aggregation_sensitivity() -> CheckResult {
    timed(1, "aggregator corruption detected", Some(Duration::from_secs(10)), || {
        let err = aggregation_max_error(5, true)?;
        Ok((err >= 1e-5, format!("corrupted W_F gives max relative error {err:.2e} (>= 1e-5)")))
    })
}

pub fn check_voxel_query_oracle() -> CheckResult {
    timed(2, "voxel query vs linear scan", Some(Duration::from_secs(30)), || {
        let mut compared = 0usize;
        for g in 0..50u64 {
            let grid = random_grid(1000, 0.05, 1, 300 + g)?;
            let hi = grid.config().range_max;
            let mut rng = ChaCha8Rng::seed_from_u64(900 + g);
            let mut points: Vec<[f64; 3]> = (0..16).map(|_| std::array::from_fn(|a| rng.gen_range(0.0..hi[a]))).collect();
            // a few queries centered on occupied cells and outside the range
            points.extend((0..4).map(|_| grid.center(rng.gen_range(0..grid.len()))));
            points.push([-1.0, hi[1] + 1.0, 0.05]);
            for p in &points {
                for t in [0, 1, 2, 4] {
                    for k in [1, 4, 16] {
                        let got: Vec<usize> = voxel_query(&grid, *p, &QuerySpec::new(t, k)?)?.rows().collect();
                        let want = oracle::linear_scan_query(&grid, *p, t, k);
                        if got != want {
                            return Ok((false, format!("grid {g}, point {p:?}, t={t}, k={k}: {got:?} vs {want:?}")));
                        }
                        compared += 1;
                    }
                }
            }
        }
        Ok((true, format!("{compared} queries on 50 grids identical in set and order")))
    })
}

pub fn check_query_scaling() -> CheckResult {
    timed(3, "query scaling O(K) vs O(N)", Some(Duration::from_secs(180)), || {
        let cfg = QueryBenchConfig {
            spec: QuerySpec::new(4, 16)?,
            queries: 1000,
            occupancy: 0.03,
            seed: 17,
        };
        // best median over a few repeats damps scheduler noise
        let mut rows = bench_query(&[10_000, 100_000], &cfg)?;
        for _ in 0..6 {
            for (r, again) in rows.iter_mut().zip(bench_query(&[10_000, 100_000], &cfg)?) {
                r.median_ns = r.median_ns.min(again.median_ns);
            }
        }
        let med = |n: usize, m: &str| {
            rows.iter()
                .find(|r| r.n_voxels == n && r.method == m)
                .map(|r| r.median_ns)
                .unwrap_or(f64::NAN)
        };
        let vq_growth = med(100_000, "voxel_query") / med(10_000, "voxel_query");
        let ball_growth = med(100_000, "ball_query") / med(10_000, "ball_query");
        let speedup = med(100_000, "ball_query") / med(100_000, "voxel_query");
        let ok = vq_growth < 2.0 && ball_growth >= 5.0 && speedup >= 10.0;
        Ok((
            ok,
            format!("voxel query x{vq_growth:.2} (< 2), ball query x{ball_growth:.1} (>= 5), speedup at 1e5 x{speedup:.0} (>= 10)"),
        ))
    })
}

pub fn check_flop_model() -> CheckResult {
    timed(4, "FLOP model", Some(Duration::from_secs(10)), || {
        let grid = random_grid(300, 0.1, 16, 4)?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, c_out) in [(1usize, 32usize), (16, 32), (32, 64)] {
            let w = AggregatorWeights::init("selftest.flop", 16, c_out, &mut Initializer::new(4, 4));
            let m = 50;
            let groups: Vec<Vec<GroupedNeighbor>> = (0..m)
                .map(|_| (0..k).map(|_| GroupedNeighbor { row: rng.gen_range(0..grid.len()), rel: [0.1, -0.2, 0.3] }).collect())
                .collect();
            let (mut orig, mut acc) = (0u64, 0u64);
            aggregate_original(&grid, &groups, &w, &mut orig)?;
            let pre = pretransform(&grid, &w, &mut acc)?;
            aggregate_accelerated(&grid, &pre, &groups, &w, &mut acc)?;
            let n = grid.len() as u64;
            let (fo, fa) = (
                flop_count(AggMode::Original, n, m as u64, k as u64, 16, c_out as u64),
                flop_count(AggMode::Accelerated, n, m as u64, k as u64, 16, c_out as u64),
            );
            if orig != fo || acc != fa {
                return Ok((false, format!("K={k}: counters {orig}/{acc} vs formulas {fo}/{fa}")));
            }
        }
        let o = flop_count(AggMode::Original, 16_000, 21_600, 16, 64, 32);
        let a = flop_count(AggMode::Accelerated, 16_000, 21_600, 16, 64, 32);
        let ratio = o as f64 / a as f64;
        let ok = o == 740_966_400 && a == 65_945_600 && ratio >= 10.0;
        Ok((ok, format!("counters exact; reference point {o} / {a} = {ratio:.2} (>= 10)")))
    })
}

fn full_grid(dims: [u32; 3], channels: usize, seed: u64) -> Result<(SparseVoxelGrid, Vec<f32>)> {
    let cfg = VoxelizationConfig {
        range_min: [0.0; 3],
        range_max: dims.map(f64::from),
        voxel_size: [1.0; 3],
        max_points_per_voxel: 1,
        max_voxels: 1 << 20,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                coords.push(VoxelCoord::new(i, j, k));
            }
        }
    }
    let dense: Vec<f32> = (0..coords.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok((SparseVoxelGrid::new(cfg, 1, channels, coords, dense.clone())?, dense))
}

pub fn check_sparse_conv_oracle() -> CheckResult {
    timed(5, "sparse conv vs dense conv", Some(Duration::from_secs(30)), || {
        let mut max_diff = 0.0f32;
        let mut cases = 0;
        for (dims, seed) in [([16, 16, 16], 1u64), ([9, 12, 7], 2), ([5, 5, 5], 3), ([1, 2, 3], 4)] {
            let (grid, dense) = full_grid(dims, 4, seed)?;
            for (stride, mode) in [(1, ConvMode::Submanifold), (1, ConvMode::Regular), (2, ConvMode::Regular)] {
                let layer = Conv3dLayer::init("selftest.conv", 4, 8, stride, mode, &mut Initializer::new(seed, 5));
                let out = sparse_conv3d(&grid, &layer)?;
                let (want, od) = oracle::dense_conv3d(&dense, dims, 4, &layer.weights, &layer.bias, 8, stride);
                if out.len() != (od[0] * od[1] * od[2]) as usize {
                    return Ok((false, format!("{dims:?} {mode:?}: {} active sites vs {} dense", out.len(), want.len() / 8)));
                }
                for (row, c) in out.coords().iter().enumerate() {
                    let lin = ((c.i * od[1] + c.j) * od[2] + c.k) as usize;
                    for co in 0..8 {
                        max_diff = max_diff.max((out.feature(row)[co] - want[lin * 8 + co]).abs());
                    }
                }
                cases += 1;
            }
        }
        Ok((max_diff < 1e-5, format!("{cases} grid/mode cases, max |diff| {max_diff:.2e} (< 1e-5)")))
    })
}

pub fn check_rotated_iou() -> CheckResult {
    timed(6, "rotated IoU vs Monte Carlo", Some(Duration::from_secs(120)), || {
        let unit = |yaw: f64| Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], yaw);
        let (a, b) = (unit(0.0)?, unit(std::f64::consts::FRAC_PI_4)?);
        let analytic = iou_bev(&a, &b);
        if (analytic - 0.7071).abs() >= 2e-3 {
            return Ok((false, format!("pi/4 square case gives {analytic}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let mut rand_box = |spread: f64| {
                Box3D::new(
                    [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), 0.0],
                    [rng.gen_range(1.0..5.0), rng.gen_range(0.5..2.5), 1.5],
                    rng.gen_range(-3.14..3.14),
                )
            };
            let (p, q) = (rand_box(0.3)?, rand_box(2.0)?);
            let mc = oracle::monte_carlo_iou_bev(&p, &q, 1000, i);
            worst = worst.max((iou_bev(&p, &q) - mc).abs());
        }
        Ok((worst < 2e-3, format!("pi/4 case {analytic:.4}; 100 pairs, max |diff| {worst:.2e} (< 2e-3)")))
    })
}

pub fn check_confidence_target() -> CheckResult {
    timed(7, "IoU-guided confidence target", None, || {
        let cfg = HeadLossConfig::default();
        let cases = [(0.0, 0.0), (0.2, 0.0), (0.25, 0.0), (0.5, 0.5), (0.75, 1.0), (0.8, 1.0), (1.0, 1.0)];
        for (iou, want) in cases {
            let got = confidence_target(iou, &cfg);
            if got != want {
                return Ok((false, format!("iou {iou}: {got} != {want}")));
            }
        }
        let mut jump = 0.0f64;
        for knot in [cfg.theta_l, cfg.theta_h] {
            let at = confidence_target(knot, &cfg);
            for eps in [1e-13, -1e-13] {
                jump = jump.max((confidence_target(knot + eps, &cfg) - at).abs());
            }
        }
        Ok((jump < 1e-12, format!("7 values exact, max jump at knots {jump:.1e} (< 1e-12)")))
    })
}

pub fn check_loss_fixtures() -> CheckResult {
    timed(8, "loss fixtures", None, || {
        let focal = FocalParams::default();
        let huber = HuberParams::default();
        let cfg = HeadLossConfig::default();
        let mut t1 = [0.0; 7];
        t1[0] = 0.1;
        let targets = RpnTargets {
            labels: vec![LABEL_FG, LABEL_BG],
            reg_targets: vec![t1, [0.0; 7]],
            num_fg: 1,
        };
        let d0 = [0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.05];
        let rpn = rpn_loss(&[0.8, 0.3], &[d0, [0.0; 7]], &targets, &focal, &huber)?;
        let rpn_zero = rpn_loss(&[1.0, 0.0], &[t1, [0.0; 7]], &targets, &focal, &huber)?;
        let mut h0 = [0.0; 7];
        h0[0] = 0.2;
        let head = head_loss(&[0.9, 0.6, 0.2], &[h0, [5.0; 7], [5.0; 7]], &[0.8, 0.5, 0.1], &[[0.0; 7]; 3], &cfg, &huber)?;
        let head_zero = head_loss(&[1.0, 0.0], &[[0.1; 7]; 2], &[0.9, 0.1], &[[0.1; 7]; 2], &cfg, &huber)?;
        let errs = [
            (rpn.cls - 0.02630699422900654).abs(),
            (rpn.reg - 0.05625).abs(),
            (rpn.total - 0.08255699422900654).abs(),
            (head.cls - 0.34735408159736963).abs(),
            (head.reg - 0.048148148148148155).abs(),
            (head.total - 0.39550222974551774).abs(),
        ];
        let worst = errs.iter().copied().fold(0.0, f64::max);
        let ok = worst < 1e-9 && rpn_zero.total < 1e-9 && head_zero.total < 1e-9;
        Ok((
            ok,
            format!(
                "max fixture error {worst:.1e}; zero fixtures {:.1e}, {:.1e} (< 1e-9)",
                rpn_zero.total, head_zero.total
            ),
        ))
    })
}

fn ap_gt() -> Result<Box3D> {
    Box3D::new([10.0, 0.0, -1.0], [3.9, 1.6, 1.56], 0.0)
}

pub fn check_ap_extremes() -> CheckResult {
    timed(9, "AP extremes", None, || {
        let gts = [ap_gt()?, Box3D::new([20.0, 4.0, -1.0], [4.2, 1.7, 1.5], 0.5)?];
        let dets: Vec<ScoredBox> = gts.iter().zip([0.3, 0.8]).map(|(b, s)| ScoredBox::new(*b, s)).collect();
        let mut vals = Vec::new();
        for mode in [ApMode::R11, ApMode::R40] {
            vals.push(evaluate_ap(&dets, &gts, 0.7, mode, IouKind::ThreeD)?.ap);
            vals.push(evaluate_ap(&[], &gts, 0.7, mode, IouKind::ThreeD)?.ap);
        }
        let ok = (vals[0] - 1.0).abs() < 1e-9 && (vals[2] - 1.0).abs() < 1e-9 && vals[1] == 0.0 && vals[3] == 0.0;
        Ok((ok, format!("perfect r11/r40 = {}/{}, empty r11/r40 = {}/{}", vals[0], vals[2], vals[1], vals[3])))
    })
}

/// One gt, two detections: the higher-scored one misses, the lower one hits.
pub fn ap_fixture_value() -> Result<f64> {
    let gt = ap_gt()?;
    let miss = Box3D { cx: 40.0, ..gt };
    let dets = [ScoredBox::new(miss, 0.9), ScoredBox::new(gt, 0.6)];
    Ok(evaluate_ap(&dets, &[gt], 0.7, ApMode::R11, IouKind::ThreeD)?.ap)
}

/// Expected value of [`ap_fixture_value`] as stated by the acceptance table.
pub const AP_FIXTURE_EXPECTED: f64 = 6.0 / 11.0 * 0.5;

pub fn check_ap_fixture() -> CheckResult {
    timed(9, "AP 1-gt/2-det fixture", None, || {
        let got = ap_fixture_value()?;
        Ok((
            (got - AP_FIXTURE_EXPECTED).abs() < 1e-4,
            format!("recall-11 AP {got:.4}, expected {AP_FIXTURE_EXPECTED:.4}"),
        ))
    })
}

/// Expected stage shapes of the KITTI preset.
pub fn kitti_trace_expectation() -> Vec<(&'static str, [usize; 3], usize)> {
    vec![
        ("stage1", [1408, 1600, 40], 16),
        ("stage2", [704, 800, 20], 32),
        ("stage3", [352, 400, 10], 48),
        ("stage4", [176, 200, 5], 64),
        ("bev", [176, 200, 1], 320),
        ("backbone2d", [176, 200, 1], 192),
    ]
}

pub fn trace_matches(trace: &[StageShape], expected: &[(&str, [usize; 3], usize)]) -> bool {
    expected.iter().all(|(name, dims, ch)| {
        trace
            .iter()
            .any(|s| s.stage == *name && s.dims == *dims && s.channels == *ch)
    })
}

pub fn check_end_to_end() -> CheckResult {
    timed(10, "end-to-end determinism", Some(Duration::from_secs(60)), || {
        let cfg = PipelineConfig::kitti();
        let scene = synth_scene(10, 8, &cfg.voxelization)?;
        let params = ModelParams::init(10, &cfg)?;
        let run = |threads: usize| -> Result<(String, Vec<StageShape>)> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| crate::error::Error::InvalidConfig(e.to_string()))?;
            let out = pool.install(|| pipeline_forward(&scene.cloud, &params, &cfg))?;
            Ok((format_scored_boxes(&out.detections), out.trace))
        };
        let (a, trace) = run(4)?;
        let (b, _) = run(4)?;
        let (c, _) = run(1)?;
        let shapes = trace_matches(&trace, &kitti_trace_expectation());
        let n = a.lines().count();
        Ok((
            a == b && a == c && shapes && n <= 100,
            format!(
                "{n} detections; repeat {}, 1 vs 4 threads {}, shape trace {}",
                if a == b { "identical" } else { "DIFFERS" },
                if a == c { "identical" } else { "DIFFERS" },
                if shapes { "matches" } else { "MISMATCH" }
            ),
        ))
    })
}

/// Every check, in criterion order.
pub fn all_checks() -> [fn() -> CheckResult; 12] {
    [
        check_aggregation_equivalence,
        check_aggregation_sensitivity,
        check_voxel_query_oracle,
        check_query_scaling,
        check_flop_model,
        check_sparse_conv_oracle,
        check_rotated_iou,
        check_confidence_target,
        check_loss_fixtures,
        check_ap_extremes,
        check_ap_fixture,
        check_end_to_end,
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    all_checks().iter().map(|f| f()).collect()
}
