use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vrk_core::geom3d::format_boxes;
use vrk_core::harness::config::PipelineConfig;
use vrk_core::harness::eval::evaluate_ap;
use vrk_core::harness::io::{read_cloud, read_detections, read_boxes, write_bin, write_detections};
use vrk_core::harness::pipeline::{pipeline_forward, ModelParams};
use vrk_core::harness::selftest;
use vrk_core::harness::synth::{occupancy, synth_scene};
use vrk_core::roipool::{aggregate_accelerated, aggregate_original, flop_count, pretransform, GroupedNeighbor};
use vrk_core::targets::{evaluate_bundle, LossBundle};
use vrk_core::voxelizer::voxelize;
use vrk_core::vquery::{bench_query, random_grid, write_bench_csv, QueryBenchConfig};
use vrk_core::{AggMode, ApMode, IouKind, QuerySpec};

#[derive(Parser)]
#[command(name = "vrk", version, about = "Sparse voxel detector with voxel RoI pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a point cloud and write the sparse grid as JSON
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full detector on a point cloud
    Detect(DetectArgs),
    /// Manage weight directories
    #[command(subcommand)]
    Weights(WeightsCommand),
    /// Micro-benchmarks
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Average precision of detections against ground truth
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value = "r40")]
        mode: ApMode,
        #[arg(long, default_value = "3d")]
        kind: IouKind,
    },
    /// Generate a synthetic scene: `--out cloud.bin,boxes.txt`
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        objects: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        out: Vec<PathBuf>,
    },
    /// Run every oracle-backed check and print a report
    Selftest {
        /// Also write the report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Loss evaluators
    #[command(subcommand)]
    Losses(LossesCommand),
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Aggregation path; overrides the config
    #[arg(long)]
    agg: Option<AggMode>,
    /// Print analytic and instrumented multiply-accumulate counts
    #[arg(long)]
    flops: bool,
    /// Worker threads (0 = rayon default)
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Write the stage shape trace as JSON
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Write seeded random weights for a config
    Init {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Voxel query vs ball query latency over grid sizes (CSV)
    Query {
        #[arg(long, value_delimiter = ',', default_value = "10000,100000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        threshold: u32,
        #[arg(long, default_value_t = 500)]
        queries: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Original vs accelerated aggregation on random cases
    Agg {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum LossesCommand {
    /// Evaluate RPN and head losses from a JSON bundle
    Eval {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::kitti()),
    }
}

fn detect(args: &DetectArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(agg) = args.agg {
        cfg.aggregation = agg;
    }
    let cloud = read_cloud(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let params = ModelParams::load(&args.weights, &cfg).with_context(|| format!("loading weights {}", args.weights.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build()?;
    let out = pool.install(|| pipeline_forward(&cloud, &params, &cfg))?;
    write_detections(&args.out, &out.detections)?;
    if let Some(path) = &args.trace {
        fs::write(path, serde_json::to_string_pretty(&out.trace)?).with_context(|| format!("writing {}", path.display()))?;
    }
    if args.flops {
        println!("{}", serde_json::to_string_pretty(&out.flops)?);
    }
    eprintln!("{} proposals, {} detections", out.proposals.len(), out.detections.len());
    Ok(())
}

fn bench_agg(cases: usize, seed: u64) -> Result<()> {
    let (n, m, k, c, c_out) = (4000usize, 216usize, 16usize, 64usize, 32usize);
    let mut worst = 0.0f32;
    let (mut t_orig, mut t_acc) = (Vec::with_capacity(cases), Vec::with_capacity(cases));
    let (mut macs_orig, mut macs_acc) = (0u64, 0u64);
    for case in 0..cases as u64 {
        let grid = random_grid(n, 0.03, c, seed.wrapping_add(case))?;
        let w = vrk_core::AggregatorWeights::init("bench", c, c_out, &mut vrk_core::params::Initializer::new(seed, case));
        let groups: Vec<Vec<GroupedNeighbor>> = (0..m)
            .map(|g| {
                (0..k)
                    .map(|j| {
                        let h = (case as usize * 7919 + g * 131 + j * 17) % n;
                        GroupedNeighbor {
                            row: h,
                            rel: [(j as f32 - 8.0) * 0.05, (g % 7) as f32 * 0.1 - 0.3, 0.1],
                        }
                    })
                    .collect()
            })
            .collect();
        let (mut mo, mut ma) = (0, 0);
        let t = Instant::now();
        let a = aggregate_original(&grid, &groups, &w, &mut mo)?;
        t_orig.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let pre = pretransform(&grid, &w, &mut ma)?;
        let b = aggregate_accelerated(&grid, &pre, &groups, &w, &mut ma)?;
        t_acc.push(t.elapsed().as_secs_f64());
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max(selftest::relative_error(*x, *y));
        }
        macs_orig = mo;
        macs_acc = ma;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
    };
    let report = json!({
        "cases": cases,
        "n": n, "m": m, "k": k, "c": c, "c_out": c_out,
        "max_relative_error": worst,
        "median_ms_original": median(&mut t_orig) * 1e3,
        "median_ms_accelerated": median(&mut t_acc) * 1e3,
        "macs_original": macs_orig,
        "macs_accelerated": macs_acc,
        "formula_original": flop_count(AggMode::Original, n as u64, m as u64, k as u64, c as u64, c_out as u64),
        "formula_accelerated": flop_count(AggMode::Accelerated, n as u64, m as u64, k as u64, c as u64, c_out as u64),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Voxelize { input, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let cloud = read_cloud(&input).with_context(|| format!("reading {}", input.display()))?;
            let grid = voxelize(&cloud, &cfg.voxelization)?;
            fs::write(&out, grid.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} points -> {} voxels", cloud.len(), grid.len());
        }
        Command::Detect(args) => detect(&args)?,
        Command::Weights(WeightsCommand::Init { seed, config, out }) => {
            let cfg = load_config(config.as_deref())?;
            ModelParams::init(seed, &cfg)?.save(&out)?;
            eprintln!("wrote weights to {}", out.display());
        }
        Command::Bench(BenchCommand::Query { n, k, threshold, queries, seed, out }) => {
            let cfg = QueryBenchConfig {
                spec: QuerySpec::new(threshold, k)?,
                queries,
                occupancy: 0.03,
                seed,
            };
            let rows = bench_query(&n, &cfg)?;
            match out {
                Some(path) => write_bench_csv(&rows, fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?)?,
                None => write_bench_csv(&rows, io::stdout().lock())?,
            }
        }
        Command::Bench(BenchCommand::Agg { cases, seed }) => bench_agg(cases, seed)?,
        Command::Eval { dets, gts, iou, mode, kind } => {
            let dets = read_detections(&dets).with_context(|| format!("reading {}", dets.display()))?;
            let gts: Vec<_> = read_boxes(&gts)
                .with_context(|| format!("reading {}", gts.display()))?
                .into_iter()
                .map(|(b, _)| b)
                .collect();
            let r = evaluate_ap(&dets, &gts, iou, mode, kind)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Synth { seed, objects, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let [cloud_path, boxes_path] = out.as_slice() else {
                bail!("--out takes two comma-separated paths: <cloud.bin>,<boxes.txt>");
            };
            let scene = synth_scene(seed, objects, &cfg.voxelization)?;
            write_bin(cloud_path, &scene.cloud)?;
            fs::write(boxes_path, format_boxes(&scene.gts)).with_context(|| format!("writing {}", boxes_path.display()))?;
            let occ = occupancy(&scene.cloud, &cfg.voxelization)?;
            eprintln!(
                "{} points, {} objects ({} dropped), occupancy {:.5}",
                scene.cloud.len(),
                scene.gts.len(),
                scene.dropped(),
                occ
            );
        }
        Command::Selftest { json } => {
            let start = Instant::now();
            let mut failed = 0;
            let mut results = Vec::new();
            let mut stdout = io::stdout().lock();
            for check in selftest::all_checks() {
                let r = check();
                writeln!(stdout, "{}", r.line())?;
                stdout.flush()?;
                failed += usize::from(!r.passed);
                results.push(r);
            }
            writeln!(
                stdout,
                "{} checks, {} passed, {} failed, {:.1}s total",
                results.len(),
                results.len() - failed,
                failed,
                start.elapsed().as_secs_f64()
            )?;
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&results)?)?;
            }
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Losses(LossesCommand::Eval { input }) => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let bundle: LossBundle = serde_json::from_str(&text).context("parsing loss bundle")?;
            println!("{}", serde_json::to_string_pretty(&evaluate_bundle(&bundle)?)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
