use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use symbridge_lab::{load_config, output_dir, run_experiment};

#[derive(Parser)]
#[command(name = "symbridge", version, about = "Run symmetrized-bridge experiments from a JSON config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment and write artifacts plus report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Validate { config } => match load_config(&config) {
            Ok(_) => {
                println!("{}: valid", config.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run { config, out, threads } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(k) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
                    eprintln!("error: cannot start {k} threads: {e}");
                    return ExitCode::from(2);
                }
            }
            let dir = output_dir(&cfg, out);
            match run_experiment(&cfg, &dir) {
                Ok(report) => {
                    for c in &report.checks {
                        println!("{}", c.line());
                    }
                    println!("report: {}", dir.join("report.json").display());
                    if report.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
