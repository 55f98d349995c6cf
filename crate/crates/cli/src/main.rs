use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowfilt::config::{load_scenario, LoadError};
use flowfilt::runner::{run, RunnerError};

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "flowfilt",
    version,
    about = "Stochastic particle flow scenario runner",
    disable_version_flag = false
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trace CSV + summary JSON.
    Run {
        /// Path to the scenario JSON file.
        config: PathBuf,
        /// Directory for output files (default: current directory).
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Replace the scenario's seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Suppress the end-of-run report on stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Check a scenario file and report every validation problem.
    Validate { config: PathBuf },
    /// Print the version.
    Version,
}

fn configure_threads() {
    if let Ok(value) = std::env::var("FLOWFILT_THREADS") {
        match value.parse::<usize>() {
            Ok(threads) if threads > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
            _ => eprintln!("warning: ignoring invalid FLOWFILT_THREADS={value}"),
        }
    }
}

fn load_exit_code(err: &LoadError) -> u8 {
    match err {
        LoadError::Io { .. } => EXIT_IO,
        LoadError::Parse { .. } | LoadError::Invalid(_) => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Version => {
            println!("flowfilt {}", env!("CARGO_PKG_VERSION"));
            EXIT_OK
        }
        Command::Validate { config } => match load_scenario(&config) {
            Ok(plan) => {
                println!(
                    "ok: scenario '{}' (dimension {}, mode {}, {} particles)",
                    plan.name,
                    plan.dimension,
                    plan.mode.as_str(),
                    plan.particles
                );
                EXIT_OK
            }
            Err(e) => {
                eprintln!("{e}");
                load_exit_code(&e)
            }
        },
        Command::Run {
            config,
            out_dir,
            seed_override,
            quiet,
        } => match load_scenario(&config) {
            Err(e) => {
                eprintln!("{e}");
                load_exit_code(&e)
            }
            Ok(mut plan) => {
                if let Some(seed) = seed_override {
                    plan.override_seed(seed);
                }
                match run(&plan, &out_dir) {
                    Ok(outcome) => {
                        if !quiet {
                            let s = &outcome.summary;
                            println!(
                                "scenario '{}' seed {} finished in {:.3}s",
                                s.scenario, s.seed, s.duration_seconds
                            );
                            if let (Some(m), Some(c)) = (s.mahalanobis_gap, s.covariance_gap) {
                                println!(
                                    "  mean gap {:.4} (standardized), covariance gap {:.4}",
                                    m, c
                                );
                            }
                            if let Some(v) = s.exact_flow_v_drift {
                                println!("  exact-flow V drift {v:.3e}");
                            }
                            println!("  trace:   {}", outcome.trace_path.display());
                            println!("  summary: {}", outcome.summary_path.display());
                        }
                        EXIT_OK
                    }
                    Err(RunnerError::Io(e)) => {
                        eprintln!("i/o failure: {e}");
                        EXIT_IO
                    }
                    Err(e) => {
                        eprintln!("run failed: {e}");
                        EXIT_RUNTIME
                    }
                }
            }
        },
    };
    ExitCode::from(code)
}
