mod commands;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "planpred",
    version,
    about = "Scenario generation, training, evaluation and closed-loop simulation",
    subcommand_required = true,
    arg_required_else_help = false
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scenario frames as JSON Lines.
    Gen(GenArgs),
    /// Train a model; writes per-epoch checkpoints, train_log.csv and config.json.
    Train(TrainArgs),
    /// Open-loop prediction ADE/FDE per frame, as CSV.
    Eval(EvalArgs),
    /// Closed-loop log-replay episodes; writes sim_report.csv.
    Simulate(SimulateArgs),
    /// Static SVG plots of frames (with optional model output) or of a metrics CSV.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// First frame seed; frame i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of frames.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Map template: straight, arc, intersection or crosswalk. Overrides the config.
    #[arg(long)]
    pub template: Option<String>,
    /// Generator spec JSON (template, num_agents, speed_range, episode_seconds, arc_radius, layout).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config JSON; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training frames (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file (.gdpp).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Frames to evaluate (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Config JSON; defaults to config.json beside the checkpoint, then built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RefinerArg {
    None,
    Gradient,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Checkpoint file (.gdpp).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Episode frames (JSONL); each needs a logged future as long as the horizon.
    #[arg(long)]
    pub data: PathBuf,
    /// Config JSON; an optional "sim" object sets horizon_seconds and off_route_threshold.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV.
    #[arg(long, default_value = "sim_report.csv")]
    pub out: PathBuf,
    /// Number of episodes (first frames of the file); all when absent.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Plan refinement applied before executing the first control.
    #[arg(long, value_enum, default_value_t = RefinerArg::None)]
    pub refiner: RefinerArg,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Frames (JSONL) or a metrics CSV such as train_log.csv or sim_report.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint whose plan and predictions are drawn over the frames.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Config JSON for the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of frames to draw.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
