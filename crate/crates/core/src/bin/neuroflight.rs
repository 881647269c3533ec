use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neuroflight::cli::{execute, Command, RunConfig};

#[derive(Parser)]
#[command(name = "neuroflight", version, about = "Spiking optical flow and evolved quadrotor control")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Self-supervised training of the corner network.
    TrainVision(Common),
    /// Endpoint error and observable traces of a checkpoint.
    EvalVision(Common),
    /// Evolve the linear controller in simulation.
    Evolve(Common),
    /// Closed-loop simulation or open-loop event replay.
    Fly(Common),
    /// Inference throughput at three event densities.
    Bench(Common),
    /// WebSocket endpoint for the flight console.
    Serve(Common),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Sub::TrainVision(c) => (Command::TrainVision, c),
        Sub::EvalVision(c) => (Command::EvalVision, c),
        Sub::Evolve(c) => (Command::Evolve, c),
        Sub::Fly(c) => (Command::Fly, c),
        Sub::Bench(c) => (Command::Bench, c),
        Sub::Serve(c) => (Command::Serve, c),
    };
    let run = || -> neuroflight::Result<serde_json::Value> {
        let cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let seed = common.seed.or(cfg.seed).unwrap_or(0);
        let out = common
            .out
            .clone()
            .or_else(|| cfg.paths.logs.clone())
            .unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
        execute(cmd, &cfg, seed, &out)
    };
    match run() {
        Ok(report) => println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
