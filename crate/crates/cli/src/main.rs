//! `fsll`: run, sweep and compare few-shot incremental learning experiments.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Axis;
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "fsll", version, about = "Few-shot incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a dotted config key, e.g. `train.lambda=3`. Repeatable.
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, seed_key: &str) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("{seed_key}={seed}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full session protocol once.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run once per value of one axis and merge the metrics.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values: numbers for fraction/lambda, on/off otherwise.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Parallel runs; defaults to the number of CPUs.
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
    /// Compare run directories; the first is the reference for the delta row.
    Report {
        #[arg(required = true, value_name = "RUN_DIR")]
        dirs: Vec<PathBuf>,
        /// Also write table.csv, comparison.csv and curves.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic corpus as a delimited file.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR", default_value = "data")]
        out: PathBuf,
    },
    /// Run gradient checks and invariant checks on random instances.
    Check {
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "N", default_value_t = 8)]
        trials: usize,
    },
}

fn init_logging() {
    let level = match std::env::var("FSLL_LOG") {
        Ok(l) if matches!(l.as_str(), "error" | "info" | "debug") => l,
        Ok(other) => {
            eprintln!("FSLL_LOG={other:?} is not one of error, info, debug; using info");
            "info".to_string()
        }
        Err(_) => "info".to_string(),
    };
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .format_target(false)
        .init();
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out } => {
            let config = config.load("seed")?;
            let out = out
                .or_else(|| config.out.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(config.method.to_ascii_lowercase()));
            let report = commands::run(&config, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Ablate {
            config,
            axis,
            values,
            out,
            jobs,
        } => {
            let config = config.load("seed")?;
            let out = out
                .or_else(|| config.out.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("ablate-{}", axis.name())));
            print!("{}", commands::ablate(&config, axis, &values, &out, jobs)?);
        }
        Command::Report { dirs, out } => print!("{}", commands::report(&dirs, out.as_deref())?),
        Command::GenData { config, out } => {
            let config = config.load("data.synthetic.seed")?;
            println!("{}", commands::gen_data(&config, &out)?.display());
        }
        Command::Check { seed, trials } => commands::check(seed, trials)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
