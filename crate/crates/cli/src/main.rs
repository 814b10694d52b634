mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pillarkit::config::{Paradigm, PipelineConfig};
use pillarkit::detect::IouKind;
use pillarkit::pillars::Interp;

/// Exit status for a run that completed but failed its check.
pub const EXIT_CHECK_FAILED: u8 = 1;
/// Exit status for usage, configuration and IO errors.
pub const EXIT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(
    name = "pillarkit",
    version,
    about = "Pillar-based LiDAR detection pipeline tools"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON). Unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Base seed for scene generation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    paradigm: Option<ParadigmArg>,

    /// Pillar-to-point interpolation.
    #[arg(long, global = true, value_enum)]
    interp: Option<InterpArg>,

    /// IoU used for evaluation matching.
    #[arg(long = "iou-kind", global = true, value_enum)]
    iou_kind: Option<IouKindArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParadigmArg {
    Anchor,
    Point,
    Pillar,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum IouKindArg {
    Bev,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes (PLRD points + JSON labels) and a manifest.
    Generate {
        /// Number of scenes; seeds run from the base seed upward.
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Export target assignment for one scene as JSON lines.
    Assign {
        /// Scene point file (.plrd) with its sidecar next to it.
        scene: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Oracle targets through decode, NMS and evaluation against the same
    /// ground truth. Exits 1 unless every AP is 1.
    Roundtrip {
        scene: PathBuf,
        /// Pillar assignment export to use as the prediction maps instead of
        /// fresh oracle targets.
        #[arg(long, value_name = "PATH")]
        targets: Option<PathBuf>,
        /// Also write the detections as JSON lines.
        #[arg(long, value_name = "PATH")]
        detections: Option<PathBuf>,
        /// Metrics output; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Evaluate a detections file against the scenes of a manifest.
    Eval {
        /// Detections as JSON lines.
        detections: PathBuf,
        /// Manifest written by `generate`.
        manifest: PathBuf,
        /// Metrics output; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Also write the metrics as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Time each pipeline stage across point counts; CSV output.
    Bench {
        /// Comma-separated point counts.
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        sizes: Vec<usize>,
        /// Repetitions per stage; the fastest is reported.
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        /// CSV output; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> pillarkit::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.scene.seed = seed;
    }
    if let Some(p) = common.paradigm {
        cfg.paradigm = match p {
            ParadigmArg::Anchor => Paradigm::Anchor,
            ParadigmArg::Point => Paradigm::Point,
            ParadigmArg::Pillar => Paradigm::Pillar,
        };
    }
    if let Some(i) = common.interp {
        cfg.interp = match i {
            InterpArg::Nearest => Interp::Nearest,
            InterpArg::Bilinear => Interp::Bilinear,
        };
    }
    if let Some(k) = common.iou_kind {
        cfg.eval.iou_kind = match k {
            IouKindArg::Bev => IouKind::Bev,
            IouKindArg::ThreeD => IouKind::ThreeD,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PILLARKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PILLARKIT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_ERROR);
    }
    let cfg = match load_config(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    let result = match cli.command {
        Command::Generate { count, out } => commands::generate(&cfg, count, &out),
        Command::Assign { scene, out } => commands::assign(&cfg, &scene, out.as_deref()),
        Command::Roundtrip {
            scene,
            targets,
            detections,
            out,
        } => commands::roundtrip(
            &cfg,
            &scene,
            targets.as_deref(),
            detections.as_deref(),
            out.as_deref(),
        ),
        Command::Eval {
            detections,
            manifest,
            out,
            csv,
        } => commands::eval(&cfg, &detections, &manifest, out.as_deref(), csv.as_deref()),
        Command::Bench { sizes, repeat, out } => {
            commands::bench(&cfg, &sizes, repeat, out.as_deref())
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
