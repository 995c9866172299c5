use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod cmd;
mod config;
mod error;

use config::Config;
use error::CliError;

/// Trajectory extraction, observation augmentation, dataset generation,
/// evaluation and simulation.
#[derive(Debug, Parser)]
#[command(name = "st-guidance", version)]
struct Cli {
    /// `key = value` config file; defaults to $ST_GUIDANCE_CONFIG. Flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a 2D point track plus depth into an 8-waypoint 3D trajectory.
    Extract(ExtractArgs),
    /// Lift an 8-point image trajectory with a depth anchor.
    Lift(LiftArgs),
    /// Mask, inpaint and overlay an RGB-D observation.
    Augment(AugmentArgs),
    /// Build grounding samples from annotated videos.
    GenDataset(GenDatasetArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run simulated episodes with a planner and a policy.
    Simulate(SimulateArgs),
    /// Serve the mock planner over stdin/stdout.
    #[command(hide = true)]
    PlanServer,
    /// Serve the mock policy over stdin/stdout.
    #[command(hide = true)]
    ActServer {
        #[arg(long, default_value_t = st_guidance::sim::DEFAULT_STEP_LENGTH)]
        step_length: f64,
    },
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// JSON list of [frame, u, v].
    #[arg(long)]
    pub track: PathBuf,
    /// Depth map (.png in depth units, else float raster).
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Outlier threshold in pixels; defaults to the diagonal-scaled value.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub degree: Option<usize>,
    /// Number of output waypoints.
    #[arg(long, default_value_t = st_guidance::trajectory::CANONICAL_LEN)]
    pub k: usize,
    /// Accept --k other than 8.
    #[arg(long)]
    pub allow_nonstandard: bool,
    #[arg(long, value_enum, default_value_t = Weights::Uniform)]
    pub weights: Weights,
    /// Depth PNG units per meter.
    #[arg(long)]
    pub units_per_meter: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Weights {
    Uniform,
    Endpoints,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    /// JSON list of 8 points, [u, v] in pixels or thousand-scale integers.
    #[arg(long)]
    pub traj2d: PathBuf,
    /// Read --traj2d as thousand-scale coordinates.
    #[arg(long)]
    pub thousand: bool,
    /// JSON {"d_start": .., "offsets": [7 values]}.
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub anchor_tolerance: Option<f64>,
    #[arg(long)]
    pub units_per_meter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Guidance package JSON.
    #[arg(long)]
    pub guidance: PathBuf,
    /// Instance mask as ID=PATH; repeat per instance.
    #[arg(long = "mask", value_name = "ID=PATH")]
    pub masks: Vec<String>,
    /// Camera-to-workspace transform JSON; identity if omitted.
    #[arg(long)]
    pub camera_pose: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Finetuned)]
    pub mode: Mode,
    #[arg(long)]
    pub tube_radius: Option<f64>,
    /// Tube around the waypoints: capsules over segments, or balls at waypoints.
    #[arg(long, value_enum)]
    pub tube_shape: Option<Shape>,
    #[arg(long)]
    pub fallback_radius: Option<f64>,
    /// Falloff in pixels; defaults to the diagonal-scaled value.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight below which a pixel is inpainted.
    #[arg(long)]
    pub inpaint_threshold: Option<f64>,
    #[arg(long)]
    pub units_per_meter: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Frozen,
    Finetuned,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Shape {
    Capsule,
    Balls,
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

impl From<Shape> for st_guidance::guidance::TubeShape {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Capsule => Self::CapsuleChain,
            Shape::Balls => Self::BallUnion,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    /// Directory with one sub-directory per video.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split spec JSON, or "bundled".
    #[arg(long)]
    pub split: Option<String>,
    /// Comma-separated kinds to keep.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 1000, conflicts_with = "per_file")]
    pub shard_size: usize,
    /// One JSON file per sample instead of JSON-lines shards.
    #[arg(long)]
    pub per_file: bool,
    /// Prompt template JSON replacing the bundled set.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Kind of --pred/--gt files.
    #[arg(long, value_enum, requires_all = ["pred", "gt"], conflicts_with = "records")]
    pub kind: Option<EvalKind>,
    #[arg(long, requires = "kind")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "kind")]
    pub gt: Option<PathBuf>,
    /// JSON-lines records with a "kind" tag.
    #[arg(long, required_unless_present = "kind")]
    pub records: Option<PathBuf>,
    /// Pixel threshold for pointing success rate.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Text similarity scorer for planning records.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Pointing,
    Trajectory,
    Depth,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Bundled scenario name or scenario JSON; repeatable.
    #[arg(long = "scenario", required = true)]
    pub scenarios: Vec<String>,
    /// Seeds as A..B (exclusive) or a comma list.
    #[arg(long, default_value = "0")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Replanning interval H in steps.
    #[arg(long)]
    pub replan: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Give the planner the whole task instead of one stage at a time.
    #[arg(long)]
    pub no_stage_loop: bool,
    #[arg(long)]
    pub step_length: Option<f64>,
    #[arg(long)]
    pub tube_radius: Option<f64>,
    #[arg(long, value_enum)]
    pub tube_shape: Option<Shape>,
    /// "mock" or "exec:COMMAND".
    #[arg(long, default_value = "mock")]
    pub planner: String,
    /// "mock" or "exec:COMMAND".
    #[arg(long, default_value = "mock")]
    pub policy: String,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref())?;
    let mode = if cli.sequential {
        st_guidance::ExecMode::Sequential
    } else {
        st_guidance::ExecMode::default()
    };
    match cli.command {
        Command::Extract(a) => cmd::extract(&a, &cfg),
        Command::Lift(a) => cmd::lift(&a, &cfg),
        Command::Augment(a) => cmd::augment(&a, &cfg, mode),
        Command::GenDataset(a) => cmd::gen_dataset(&a, mode),
        Command::Eval(a) => cmd::eval(&a, &cfg),
        Command::Simulate(a) => cmd::simulate(&a, &cfg, mode),
        Command::PlanServer => cmd::plan_server(),
        Command::ActServer { step_length } => cmd::act_server(step_length),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", CliError::input(format!("usage: {first}")).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.category.code() as u8)
        }
    }
}
