use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rectdiff::experiments::{run_command, Command, ExperimentConfig};
use rectdiff::Error;

#[derive(Parser)]
#[command(name = "rectdiff", version, about = "Rectifier-modulated diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines)
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train, held-out and edit datasets
    GenData(Common),
    /// Pretrain the denoiser
    Pretrain(Common),
    /// Train the reconstruction rectifier
    TrainRecon(Common),
    /// Train an editing rectifier (edit_strategy = sm | markov)
    TrainEdit(Common),
    /// Draw samples from noise, optionally with a rectifier
    Sample(Common),
    /// Invert held-out images and reconstruct them
    Invert(Common),
    /// Step sweep or lambda sweep (sweep = step | lambda)
    Sweep(Common),
    /// Reconstruction loss ablation
    Ablate(Common),
    /// Held-out reconstruction metrics
    Eval(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" => 2,
        "missing-file" => 3,
        "format" => 4,
        _ => 1,
    }
}

fn run(cmd: Command, c: Common) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(out) = &c.out {
        cfg = cfg.with_out_dir(&std::path::absolute(out)?);
    }
    for p in run_command(cmd, &cfg)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::TrainRecon(c) => (Command::TrainRecon, c),
        Cmd::TrainEdit(c) => (Command::TrainEdit, c),
        Cmd::Sample(c) => (Command::Sample, c),
        Cmd::Invert(c) => (Command::Invert, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
        Cmd::Eval(c) => (Command::Eval, c),
    };
    match run(cmd, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
