//! `icvf`: world files, passive data, training, evaluation and ablations,
//! one subcommand per stage, all state passed through files.
//!
//! Exit codes: 0 success, 2 usage or config, 3 I/O or format, 4 numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "icvf",
    version,
    about = "Intention-conditioned value functions on tabular gridworlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a gridworld map file.
    World(WorldArgs),
    /// Roll out a behaviour policy and write a passive dataset.
    Collect(CollectArgs),
    /// Train an ICVF on a passive dataset.
    Train(TrainArgs),
    /// Write the exact one-hot ICVF of a world as a checkpoint.
    Embed(EmbedArgs),
    /// Probe a checkpoint against the exact oracle and check the approximation bound.
    Eval(EvalArgs),
    /// Train several model variants on shared data and compare them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct WorldArgs {
    /// Source world: a map file path or `bundled:<name>` (open5, fourrooms11).
    #[arg(long)]
    world: String,
    /// Replace the slip probability of the source map.
    #[arg(long)]
    slip: Option<f64>,
    /// Map file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CollectArgs {
    /// World: a map file path or `bundled:<name>`.
    #[arg(long)]
    world: String,
    /// Behaviour policy: `uniform` or `goal:<state>:<epsilon>` (epsilon-greedy toward a goal).
    #[arg(long, default_value = "uniform")]
    policy: String,
    /// Number of trajectories.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Steps per trajectory; each trajectory stores horizon + 1 states.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Passive dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// World used for evaluation: a map file path or `bundled:<name>`.
    #[arg(long)]
    world: String,
    /// Training config file (`key = value` lines); missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV to write [default: <out>.metrics.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// World: a map file path or `bundled:<name>`.
    #[arg(long)]
    world: String,
    /// Config file supplying the discount; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Intent goals: comma-separated state ids, `all`, or `random:<k>` [default: all].
    #[arg(long)]
    goals: Option<String>,
    /// Seed for `random:<k>` goals.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// World: a map file path or `bundled:<name>`.
    #[arg(long)]
    world: String,
    /// Config file supplying the discount and default goals; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluation goals: comma-separated state ids, `all`, or `random:<k>` [default: the training goals of the config seed].
    #[arg(long)]
    goals: Option<String>,
    /// Seed for probe rewards and `random:<k>` goals.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start state of the visitation heatmaps.
    #[arg(long, default_value_t = 0)]
    from: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Passive dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// World used for evaluation: a map file path or `bundled:<name>`.
    #[arg(long)]
    world: String,
    /// Base training config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated variants: `multilinear`, `single-intent`, `monolithic`, `d-sweep`, or `kind:key=value`.
    #[arg(long, default_value = "multilinear,single-intent,monolithic,d-sweep")]
    variants: String,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comparison CSV to write.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::World(a) => commands::world(a),
        Command::Collect(a) => commands::collect(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
