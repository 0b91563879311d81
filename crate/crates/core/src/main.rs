use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcontrib::experiments::{run_grid, summarize, ExperimentError, ExperimentGrid, RunOptions};
use fedcontrib::output::{read_results_csv, write_results_csv, write_results_jsonl, write_summary_csv};

#[derive(Parser)]
#[command(name = "fedcontrib", version, about = "Contribution measurement under attack in federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write rows as JSON lines.
        #[arg(long)]
        jsonl: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        parallel: usize,
        /// Fill the wall_time_ms column (output is then not reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Aggregate a result CSV per scheme and cell.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the default four-user grid. Writes CSV to stdout unless --out.
    Demo {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the summary table here.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        parallel: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidConfig(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            out,
            jsonl,
            parallel,
            timing,
        } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", config.display())))?;
            let grid = ExperimentGrid::from_json(&text)?;
            let rows = run_grid(
                &grid,
                RunOptions {
                    parallel,
                    record_timing: timing,
                },
            )?;
            write_results_csv(&rows, create(&out)?)?;
            if let Some(path) = jsonl {
                write_results_jsonl(&rows, create(&path)?)?;
            }
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Summarize { input, out } => {
            let file = File::open(&input)
                .map_err(|e| Failure::Config(format!("cannot open {}: {e}", input.display())))?;
            let rows = read_results_csv(BufReader::new(file))?;
            if rows.is_empty() {
                return Err(Failure::Config(format!("{} has no rows", input.display())));
            }
            write_summary_csv(&summarize(&rows), create(&out)?)?;
        }
        Command::Demo {
            out,
            summary,
            parallel,
        } => {
            let grid = ExperimentGrid::demo();
            let rows = run_grid(
                &grid,
                RunOptions {
                    parallel,
                    record_timing: false,
                },
            )?;
            match out {
                Some(path) => write_results_csv(&rows, create(&path)?)?,
                None => write_results_csv(&rows, io::stdout().lock())?,
            }
            if let Some(path) = summary {
                write_summary_csv(&summarize(&rows), create(&path)?)?;
            }
        }
    }
    io::stdout().flush().map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
