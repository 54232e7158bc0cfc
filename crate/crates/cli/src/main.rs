mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code 1 for usage errors, 2 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<canvasmar::Error> for CliError {
    fn from(e: canvasmar::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "canvasmar", version, about = "Masked autoregressive video generation with a canvas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train from a run config.
    Train(TrainArgs),
    /// Continue a conditioning video.
    Sample(SampleArgs),
    /// Score a checkpoint with an evaluation protocol.
    Eval(EvalArgs),
    /// Measure generation throughput.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// bouncing or coinflip
    #[arg(long)]
    pub kind: canvasmar::dataeval::SyntheticKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Frames per clip (default depends on kind).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub shapes: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub train: usize,
    #[arg(long, default_value_t = 64)]
    pub test: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// 6 steps, w_s 2.5, w_t 1.1
    Six,
    /// 12 steps, w_s 2.25, w_t 1.0
    Twelve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DumpFormat {
    Png,
    Ppm,
}

/// Decoding settings shared by sample, eval and bench.
#[derive(Args, Clone)]
pub struct DecodeArgs {
    /// Spatial autoregressive steps per frame.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub ws: Option<f64>,
    #[arg(long)]
    pub wt: Option<f64>,
    /// Step count and guidance scales together.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Decode with the fully conditional branch only.
    #[arg(long)]
    pub no_guidance: bool,
    #[arg(long = "r")]
    pub r: Option<f64>,
    #[arg(long = "r-prime")]
    pub r_prime: Option<f64>,
    #[arg(long)]
    pub flow_steps: Option<usize>,
    /// Frames decoded per temporal step.
    #[arg(long, default_value_t = 1)]
    pub group: usize,
    /// Run config supplying defaults for the options above.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CMV1 video whose frames condition the rollout.
    #[arg(long)]
    pub cond: PathBuf,
    /// Use only the first this many frames of the conditioning video.
    #[arg(long)]
    pub cond_frames: Option<usize>,
    /// New frames to generate.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-frame images.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DumpFormat::Png)]
    pub dump_format: DumpFormat,
    /// Also write the projected canvas of every generated frame.
    #[arg(long)]
    pub dump_canvas: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    Model,
    /// Replays ground truth.
    Oracle,
    /// Appends uniform noise.
    Noise,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub protocol: canvasmar::dataeval::Protocol,
    #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
    pub predictor: PredictorKind,
    /// Append the JSON record to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub cond_frames: usize,
    #[arg(long, default_value_t = 16)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 16)]
    pub clips_per_condition: usize,
    #[arg(long, default_value_t = 64)]
    pub test_clips: usize,
    #[arg(long, default_value_t = 16)]
    pub repeats: usize,
    /// Clips rolled out together.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "group", value_delimiter = ',', default_value = "1")]
    pub groups: Vec<usize>,
    #[arg(long = "batch", value_delimiter = ',', default_value = "1")]
    pub batches: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Frames generated per timed rollout.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
    #[arg(long)]
    pub flow_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also print the table as JSON.
    #[arg(long)]
    pub json: bool,
}

/// `seed` or a fresh one from the OS, logged so the run can be repeated.
pub fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s} (drawn from entropy; pass --seed {s} to repeat)");
        s
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
