use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use nestcomp::cli::{cmd_rate_experiment, cmd_run, cmd_validate, CliOptions};

/// Single time-scale stochastic subgradient method for nested composition problems.
#[derive(Parser)]
#[command(name = "nestcomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the method once; writes trace.csv and summary.json.
    Run(Common),
    /// Constant-stepsize runs over several horizons; writes rate.json.
    RateExperiment(Common),
    /// Check the configuration and the problem it describes.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replications.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn options(&self) -> CliOptions {
        CliOptions { out: self.out.clone(), seed: self.seed, threads: self.threads }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => cmd_run(&c.config, &c.options()).map(|dir| println!("wrote {}", dir.display())),
        Command::RateExperiment(c) => cmd_rate_experiment(&c.config, &c.options())
            .map(|(dir, report)| println!("slope {:.4}; wrote {}", report.slope, dir.join("rate.json").display())),
        Command::Validate(c) => cmd_validate(&c.config, &c.options()).map(|_| println!("ok")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
