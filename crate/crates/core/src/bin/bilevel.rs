use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bilevel::experiment::{run, ExperimentKind, RunConfig};
use bilevel::Error;

#[derive(Parser)]
#[command(name = "bilevel", version, about = "Run bilevel optimization experiments from TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` and $BILEVEL_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Parse and validate a config, printing the resolved form.
    Validate { config: PathBuf },
    /// List the experiment kinds.
    ListExperiments,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ListExperiments => {
            for kind in ExperimentKind::ALL {
                println!("{:<14} {}", kind.name(), kind.description());
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match RunConfig::from_path(&config) {
            Ok(cfg) => {
                println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(exit_code(&e))
            }
        },
        Command::Run { config, output_dir } => {
            let cfg = match RunConfig::from_path(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(exit_code(&e));
                }
            };
            let dir = output_dir.unwrap_or_else(|| cfg.resolved_output_dir());
            match run(&cfg, &dir) {
                Ok(report) => {
                    if let Some(verdicts) = &report.verdicts {
                        for (name, v) in verdicts {
                            println!(
                                "{} {name}: measured {:e}, threshold {:e}",
                                if v.pass { "PASS" } else { "FAIL" },
                                v.measured,
                                v.threshold
                            );
                        }
                    }
                    println!("artifacts in {}", dir.display());
                    if report.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAIL)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e))
                }
            }
        }
    }
}
