use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gradtrack::harness::experiment::Outcome;
use gradtrack::harness::suite::{self, SweepAxis};
use gradtrack::harness::{self, ExperimentConfig, ExperimentError};

/// Distributed stochastic gradient tracking simulator.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// Worker threads for replicas.
    #[arg(long, global = true, env = "GRADTRACK_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every ensemble of a configuration and write its artifacts.
    Run {
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the theory report without simulating.
    Theory {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run one configuration per value of a key.
    Sweep {
        config: PathBuf,
        /// `key=v1,v2,...` (`|` separates values containing commas).
        #[arg(long)]
        axis: SweepAxisArg,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the three shipped ridge instances.
    Fig1 {
        /// Multiplies step and replica budgets.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value = "out")]
        output: PathBuf,
    },
}

#[derive(Debug, Clone)]
struct SweepAxisArg(SweepAxis);

impl std::str::FromStr for SweepAxisArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(Self).map_err(|e: harness::ConfigError| e.to_string())
    }
}

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(EXIT_IO)
    })?;
    ExperimentConfig::parse(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_IO })
}

fn report(outcomes: &[Outcome]) -> ExitCode {
    let mut diverged = false;
    for o in outcomes {
        println!("wrote {}", o.config.output.display());
        for e in &o.summary.ensembles {
            let tail = e.tail("per_agent_mean_err").map_or("n/a".to_string(), |t| format!("{:.3e}", t.estimate));
            println!(
                "  {:<5} {:<20} replicas={} halted={} tail_per_agent_mean_err={tail}",
                e.algorithm.name(),
                e.policy,
                e.replicas,
                e.halted
            );
            if e.all_diverged {
                eprintln!("warning: every {} replica diverged under {}", e.algorithm, e.policy);
                diverged = true;
            }
        }
    }
    if diverged {
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cli.command {
        Command::Run { config, output } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(o) = output {
                cfg.output = o;
            }
            match suite::run_and_write(&cfg, jobs) {
                Ok(o) => report(&[o]),
                Err(e) => fail(e),
            }
        }
        Command::Theory { config, json } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match harness::prepare(&cfg) {
                Ok(setup) if json => {
                    println!("{}", serde_json::to_string_pretty(&setup.theory.to_json()).expect("json renders"));
                    ExitCode::SUCCESS
                }
                Ok(setup) => {
                    print!("{}", setup.theory.to_key_values());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep { config, axis, output } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(o) = output {
                cfg.output = o;
            }
            match harness::run_sweep(&cfg, &axis.0, jobs) {
                Ok(o) => report(&o),
                Err(e) => fail(e),
            }
        }
        Command::Fig1 { scale, output } => match harness::run_fig1(scale, &output, jobs) {
            Ok(o) => report(&o),
            Err(e) => fail(e),
        },
    }
}
