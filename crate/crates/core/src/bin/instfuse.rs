use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use instfuse::io::{export_ply, load_weights, write_json, ModelWeights, PlyFormat};
use instfuse::merging::ConfidenceFusion;
use instfuse::pipeline::{bench, evaluate_files, run, synth, BenchConfig, RunConfig};
use instfuse::superpoint::{CenterMode, ExtentMode, NormalizeOptions, PoolDenominator};
use instfuse::synthetic::SynthConfig;
use instfuse::{Error, Result};

/// Fuse per-frame 2D instance masks from a posed depth sequence into a 3D
/// instance map.
///
/// Log verbosity is read from INSTFUSE_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a frame directory and export the map.
    Run(RunArgs),
    /// Score a map export against a ground-truth file.
    Eval {
        /// Map JSON written by `run`.
        #[arg(long)]
        pred: PathBuf,
        /// gt.json written by `synth`.
        #[arg(long)]
        gt: PathBuf,
        /// Also write the result here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time similarity, matching and updating on a synthetic merge workload.
    Bench {
        /// Instances already in the map.
        #[arg(long, default_value_t = 200)]
        prev: usize,
        /// Detections in the incoming frame.
        #[arg(long, default_value_t = 50)]
        cur: usize,
        /// Contrastive vector length.
        #[arg(long, default_value_t = 256)]
        channels: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
        #[arg(long, default_value_t = 500)]
        points_per_instance: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate and render a synthetic sequence with ground truth.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Feature, box and depth perturbation level (0 = exact).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Frame directory.
    dir: PathBuf,
    /// Map JSON output.
    #[arg(long, short, default_value = "map.json")]
    out: PathBuf,
    /// Colored point cloud output.
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PlyArg::Binary)]
    ply_format: PlyArg,
    /// Per-frame timing log output (JSON).
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Weight container; without one every learned stage uses its fallback.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    mask_threshold: f64,
    #[arg(long, default_value_t = 1.75)]
    prune_threshold: f64,
    #[arg(long, default_value_t = 0.02)]
    temperature: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.6)]
    nms_iou: f64,
    /// Meters per depth unit.
    #[arg(long, default_value_t = 0.001)]
    depth_scale: f64,
    #[arg(long, value_enum, default_value_t = ExtentArg::Scalar)]
    extent: ExtentArg,
    #[arg(long, value_enum, default_value_t = CenterArg::Centroid)]
    center: CenterArg,
    #[arg(long, value_enum, default_value_t = DenominatorArg::PointCount)]
    pool_denominator: DenominatorArg,
    #[arg(long, value_enum, default_value_t = FusionArg::Max)]
    confidence_fusion: FusionArg,
    #[arg(long, default_value_t = 1.0)]
    query_ratio: f64,
    /// Feature width when frames carry no feature file.
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlyArg {
    Ascii,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtentArg {
    Scalar,
    PerAxis,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    Centroid,
    BoxCenter,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenominatorArg {
    PointCount,
    WeightSum,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Max,
    WeightedAverage,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            mask_threshold: self.mask_threshold,
            prune_threshold: self.prune_threshold,
            temperature: self.temperature,
            alpha: self.alpha,
            beta: self.beta,
            nms_iou: self.nms_iou,
            depth_scale: self.depth_scale,
            normalize: NormalizeOptions {
                extent: match self.extent {
                    ExtentArg::Scalar => ExtentMode::Scalar,
                    ExtentArg::PerAxis => ExtentMode::PerAxis,
                },
                center: match self.center {
                    CenterArg::Centroid => CenterMode::Centroid,
                    CenterArg::BoxCenter => CenterMode::BoxCenter,
                },
            },
            pool_denominator: match self.pool_denominator {
                DenominatorArg::PointCount => PoolDenominator::PointCount,
                DenominatorArg::WeightSum => PoolDenominator::WeightSum,
            },
            confidence_fusion: match self.confidence_fusion {
                FusionArg::Max => ConfidenceFusion::Max,
                FusionArg::WeightedAverage => ConfidenceFusion::WeightedAverage,
            },
            query_ratio: self.query_ratio,
            feature_channels: self.channels,
            num_classes: self.classes,
            weights: self.weights.clone(),
            seed: self.seed,
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.config();
            config.validate()?;
            let weights = match &args.weights {
                Some(p) => load_weights(p)?,
                None => ModelWeights::default(),
            };
            let out = run(&args.dir, config, weights)?;
            write_json(&args.out, &out.export)?;
            if let Some(p) = &args.ply {
                let format = match args.ply_format {
                    PlyArg::Ascii => PlyFormat::Ascii,
                    PlyArg::Binary => PlyFormat::BinaryLittleEndian,
                };
                export_ply(p, &out.map, &out.positions, format)?;
            }
            if let Some(p) = &args.timing {
                write_json(p, &out.timings)?;
            }
            println!(
                "{} frames, {} points, {} instances -> {}",
                out.map.frames,
                out.map.point_count,
                out.map.records.len(),
                args.out.display()
            );
        }
        Command::Eval { pred, gt, out } => {
            let result = evaluate_files(&pred, &gt)?;
            println!("AP {:.4}  AP50 {:.4}  AP25 {:.4}", result.ap, result.ap50, result.ap25);
            if let Some(p) = out {
                write_json(&p, &result)?;
            }
        }
        Command::Bench {
            prev,
            cur,
            channels,
            iterations,
            points_per_instance,
            seed,
        } => {
            let r = bench(BenchConfig {
                prev,
                cur,
                channels,
                iterations,
                points_per_instance,
                seed,
                ..Default::default()
            })?;
            println!(
                "prev {prev} cur {cur} channels {channels}: similarity {:.3} ms, matching {:.3} ms, \
                 updating {:.3} ms, total {:.3} ms ({} matched)",
                r.similarity_ms, r.matching_ms, r.updating_ms, r.total_ms, r.matched
            );
        }
        Command::Synth {
            seed,
            objects,
            frames,
            noise,
            classes,
            channels,
            out,
        } => {
            let seq = synth(
                &out,
                SynthConfig {
                    seed,
                    objects,
                    frames,
                    num_classes: classes,
                    noise,
                    channels,
                },
            )?;
            println!("{} frames, {} objects -> {}", seq.frames.len(), seq.scene.objects.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("INSTFUSE_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
