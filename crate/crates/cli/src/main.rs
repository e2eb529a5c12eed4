use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use expmem_cli::config::Overrides;
use expmem_cli::{cmd_ablate, cmd_build, cmd_eval, cmd_inspect, cmd_split, NoteFilter, Outcome};
use expmem_core::CandidateSource;

#[derive(Parser)]
#[command(name = "expmem", version, about = "Build and evaluate differential-diagnosis experience memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Candidates {
    Agent,
    Dataset,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Similarity threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Construction rounds (1 or 2).
    #[arg(long)]
    rounds: Option<u8>,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long, value_enum)]
    candidates: Option<Candidates>,
    /// Use the scripted mock agent from this JSON file.
    #[arg(long, value_name = "SCRIPT")]
    mock_agent: Option<PathBuf>,
    /// Use the deterministic mock embedder.
    #[arg(long)]
    mock_embedder: bool,
    /// Worker threads for agent calls.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            tau: self.tau,
            top_k: self.top_k,
            rounds: self.rounds,
            trials: self.trials,
            candidates: self.candidates.map(|c| match c {
                Candidates::Agent => CandidateSource::Agent,
                Candidates::Dataset => CandidateSource::Dataset,
            }),
            mock_agent: self.mock_agent.clone(),
            mock_embedder: self.mock_embedder,
            workers: self.workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase memory construction over the construction corpus.
    Build(RunArgs),
    /// Paired baseline and with-memory runs plus the metrics report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Only run the memory-free baseline.
        #[arg(long)]
        baseline_only: bool,
    },
    /// Run an ablation grid (the built-in six-row grid by default).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Grid file (TOML with `[[rows]]` tables).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Print stored notes.
    Inspect {
        #[arg(long)]
        store: PathBuf,
        /// Taxonomy file the store was built with (default: built-in).
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        department: Option<String>,
        #[arg(long)]
        organ: Option<String>,
        /// Keep notes whose pair contains this label.
        #[arg(long)]
        label: Option<String>,
    },
    /// Split a corpus by publication year.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        /// First year of the test portion.
        #[arg(long)]
        year: i32,
        #[arg(long)]
        construction_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Build(run) => cmd_build(&run.config, &run.overrides()),
        Command::Eval { run, baseline_only } => cmd_eval(&run.config, &run.overrides(), baseline_only),
        Command::Ablate { run, grid } => cmd_ablate(&run.config, &run.overrides(), grid.as_deref()),
        Command::Inspect {
            store,
            taxonomy,
            department,
            organ,
            label,
        } => cmd_inspect(
            &store,
            taxonomy.as_deref(),
            &NoteFilter {
                department,
                organ,
                label,
            },
        ),
        Command::Split {
            corpus,
            year,
            construction_out,
            test_out,
        } => cmd_split(&corpus, year, &construction_out, &test_out),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("EXPMEM_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            if outcome == Outcome::Partial {
                eprintln!("completed with per-case failures; see the logs");
            }
            ExitCode::from(outcome.exit_code())
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
