use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expcli::{commands, CliError, Config};

#[derive(Parser)]
#[command(name = "expcli", version, about = "Outage detection and localization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output_dir` from the config, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for Monte Carlo replications.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one measurement stream.
    Simulate(Common),
    /// Run the detector on a stored stream or a freshly generated one.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Stream file written by `simulate`; its `.meta.toml` sidecar must sit next to it.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Zero test and ranking of pairwise correlation changes.
    Localize(Common),
    /// Delay and false-alarm curves over the alpha grid.
    Experiment(Common),
    /// Detection delay as sensor coverage shrinks.
    PmuSweep(Common),
    /// Pairwise correlation heatmaps before and after the outage.
    Heatmap(Common),
}

fn load(c: &Common) -> Result<(Config, PathBuf), CliError> {
    let mut cfg = Config::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = c.parallelism {
        cfg.parallelism = p;
    }
    cfg.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Simulate(c) => {
            let (cfg, out) = load(&c)?;
            commands::simulate(&cfg, &out)
        }
        Command::Detect { common, stream } => {
            let (cfg, out) = load(&common)?;
            commands::detect(&cfg, &out, stream.as_deref())
        }
        Command::Localize(c) => {
            let (cfg, out) = load(&c)?;
            commands::localize(&cfg, &out)
        }
        Command::Experiment(c) => {
            let (cfg, out) = load(&c)?;
            commands::experiment(&cfg, &out)
        }
        Command::PmuSweep(c) => {
            let (cfg, out) = load(&c)?;
            commands::pmu_sweep(&cfg, &out)
        }
        Command::Heatmap(c) => {
            let (cfg, out) = load(&c)?;
            commands::heatmap(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
