//! Command-line front end for steerdrive.

pub mod commands;
pub mod server;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use steerdrive::evaluation::ConditionMode;
use steerdrive::training::ConditionStrategy;

#[derive(Debug, Parser)]
#[command(name = "steerdrive", version, about = "Controllable multi-agent driving behavior", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of maps and trajectory logs.
    GenerateData(GenerateArgs),
    /// Train a policy on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out windows and write a report.
    Eval(EvalArgs),
    /// Record an autonomous rollout on a map.
    Rollout(RolloutArgs),
    /// Render one ego birdview from a trajectory log as a PNG.
    Render(RenderArgs),
    /// Serve live steering sessions over a websocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON generator config; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scene count from the config.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset scored at every checkpoint.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> Result<ConditionMode, String> {
    s.parse().map_err(|e: steerdrive::error::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<ConditionStrategy, String> {
    match s {
        "sampled" => Ok(ConditionStrategy::Sampled),
        "last-timestep" => Ok(ConditionStrategy::LastTimestep),
        _ => Err(format!("unknown strategy {s:?}; expected sampled or last-timestep")),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub samples: usize,
    /// Steps at 10 Hz.
    #[arg(long, default_value_t = 40)]
    pub horizon: usize,
    /// One or more of none, w, ts, w+ts, comma separated; one report row each.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "w+ts")]
    pub conditions: Vec<ConditionMode>,
    #[arg(long, value_parser = parse_strategy, default_value = "sampled")]
    pub strategy: ConditionStrategy,
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[arg(long)]
    pub max_segments: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model name in the report; the checkpoint file stem by default.
    #[arg(long)]
    pub name: Option<String>,
    /// JSON report path; the aligned text table goes next to it as `.txt`.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    /// Conditions file keyed by agent id (`agent-0`, `agent-1`, ...).
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub agents: usize,
    #[arg(long, default_value_t = 80)]
    pub steps: usize,
    /// JSON Lines rollout record.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Trajectory log (JSON Lines, one scene per line).
    #[arg(long)]
    pub segment: PathBuf,
    /// Which scene line of the log to use.
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    #[arg(long)]
    pub t: usize,
    /// Ego agent index within the scene.
    #[arg(long)]
    pub ego: usize,
    /// Map file; by default `../maps/<location>.json` next to the log.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Optional waypoint `x,y` drawn into the frame.
    #[arg(long, value_parser = parse_point)]
    pub waypoint: Option<[f64; 2]>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Integer upscaling of the saved image.
    #[arg(long, default_value_t = 1)]
    pub scale: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint files; each is registered under its file stem.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    /// Directory of map JSON files, or a dataset directory with `maps/`.
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [x, y] => Ok([
            x.trim().parse().map_err(|e| format!("bad x: {e}"))?,
            y.trim().parse().map_err(|e| format!("bad y: {e}"))?,
        ]),
        _ => Err(format!("expected x,y but got {s:?}")),
    }
}
