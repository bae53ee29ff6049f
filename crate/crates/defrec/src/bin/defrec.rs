//! Command-line front end: `simulate` synthetic datasets, `run` the
//! recovery pipeline, `eval` a finished run against ground truth. All the
//! logic lives in the library; this file only parses arguments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use defrec::driver::{
    cmd_eval, cmd_run, cmd_simulate, format_aggregate, format_metrics_row, DriverError,
    RunConfig, SimSource,
};

#[derive(Parser)]
#[command(
    name = "defrec",
    version,
    about = "Online tissue deformation recovery from stereo-derived depth and flow, no camera pose required"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scenario name or scene config.
    Simulate(SimulateArgs),
    /// Recover a canonical surface over a dataset, writing maps and metrics.
    Run(RunArgs),
    /// Re-score a run directory against its dataset's ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name (traction, palpation, camera_pan, occlusion, rigid)
    /// or path to a scene config JSON file.
    scene: String,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Frame count override (scenario presets only).
    #[arg(long)]
    frames: Option<usize>,
    /// Noise seed (scenario presets only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory; may come from the config file instead.
    dataset: Option<PathBuf>,
    /// Run output directory; may come from the config file instead.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run config; explicit flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Deformation smoothness weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Principal-strain magnitude beyond which measurements are outliers.
    #[arg(long)]
    strain_gate: Option<f64>,
    /// Enforce instrument depth bounds on occluded points.
    #[arg(long)]
    use_pose: bool,
    /// Keep every Nth pixel of the input maps.
    #[arg(long)]
    downsample: Option<usize>,
    /// Half-open frame range A..B to process.
    #[arg(long, value_parser = parse_range)]
    frames: Option<(usize, usize)>,
    /// Write a PLY mesh per frame.
    #[arg(long)]
    ply: bool,
    /// Write accumulated strain rows to strain.csv.
    #[arg(long)]
    strain_csv: bool,
    /// Skip writing metrics.json.
    #[arg(long)]
    no_metrics: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run output directory holding recovered_*.rtf maps.
    run_dir: PathBuf,
    /// Dataset directory holding the ground truth.
    dataset: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("{s:?} is not a half-open range A..B"))?;
    let start = if a.is_empty() {
        0
    } else {
        a.parse().map_err(|e| format!("bad range start {a:?}: {e}"))?
    };
    let end = b.parse().map_err(|e| format!("bad range end {b:?}: {e}"))?;
    Ok((start, end))
}

fn build_run_config(args: &RunArgs) -> Result<RunConfig, DriverError> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(DriverError::MissingFile(path.clone()));
            }
            serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?
        }
        None => {
            let dataset = args.dataset.clone().ok_or_else(|| {
                DriverError::BadConfig("a dataset directory (or --config) is required".into())
            })?;
            let out = args.out.clone().ok_or_else(|| {
                DriverError::BadConfig("--out (or --config) is required".into())
            })?;
            RunConfig::new(dataset, out)
        }
    };
    if let Some(dataset) = &args.dataset {
        cfg.input_dir = dataset.clone();
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    }
    if let Some(gate) = args.strain_gate {
        cfg.strain_gate = gate;
    }
    if args.use_pose {
        cfg.use_pose = true;
    }
    if let Some(stride) = args.downsample {
        cfg.downsample = stride;
    }
    if args.frames.is_some() {
        cfg.frame_range = args.frames;
    }
    if args.ply {
        cfg.export_ply = true;
    }
    if args.strain_csv {
        cfg.export_strain_csv = true;
    }
    if args.no_metrics {
        cfg.export_metrics_json = false;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), DriverError> {
    match cli.command {
        Command::Simulate(args) => {
            let path = Path::new(&args.scene);
            let source = if path.is_file() || args.scene.ends_with(".json") {
                SimSource::ConfigFile(path)
            } else {
                SimSource::Scenario { name: &args.scene, frames: args.frames, seed: args.seed }
            };
            let manifest = cmd_simulate(source, &args.out)?;
            println!(
                "wrote {} frames ({}x{}) to {}",
                manifest.frames,
                manifest.width,
                manifest.height,
                args.out.display()
            );
        }
        Command::Run(args) => {
            let cfg = build_run_config(&args)?;
            let output = cmd_run(&cfg)?;
            for fm in &output.metrics.per_frame {
                println!("{}", format_metrics_row(fm));
            }
            println!("{}", format_aggregate(&output.metrics.aggregate));
            println!(
                "{} frames in {:.1} ms -> {}",
                output.frames_processed,
                output.metrics.timing_ms,
                cfg.output_dir.display()
            );
        }
        Command::Eval(args) => {
            cmd_eval(&args.run_dir, &args.dataset)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
