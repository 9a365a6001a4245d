use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use klfuse_cli::{cmd_report, cmd_run, cmd_validate, ReportKind};

#[derive(Parser)]
#[command(name = "klfuse", version, about = "One-shot distributed learning by KL-averaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep in a config and write records as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarize a record CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        kind: ReportKind,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, threads } => {
            if let Some(t) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            }
            cmd_run(&config, &out).map(|m| {
                println!(
                    "wrote {} records to {} ({} failed)",
                    m.records_written, m.output_path, m.failed_records
                );
                m.failed_records
            })
        }
        Command::Report { input, kind } => cmd_report(&input, kind).map(|t| {
            print!("{t}");
            0
        }),
        Command::Validate { config } => cmd_validate(&config).map(|msg| {
            println!("{msg}");
            0
        }),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("{failed} record(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
