//! `ffck`: command-line pipeline over the forbidden-fact analysis library.
//!
//! One subcommand per analysis; every output directory carries a
//! `manifest.json` with content hashes of inputs and outputs, so artifacts
//! are reproducible from (config, seed) alone and staleness is detectable.
//!
//! Exit codes: 0 success, 1 input error, 2 internal error. Errors go to
//! standard error; data only to files.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "ffck",
    version,
    about = "forbidden-fact circuit analysis pipeline",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each one states which it requires.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Subcommand-specific JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for everything this subcommand generates or samples.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model checkpoint to analyze.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (world.json plus rendered triples).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (env FFCK_THREADS as fallback; default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a fact world.
    GenWorld(Common),
    /// Render the three-way prompt triples of a world.
    RenderData(Common),
    /// Train the toy transformer on a world.
    Train(Common),
    /// Construct a model with a planted suppression circuit.
    Plant(Common),
    /// Keep only triples where forbidding the answer visibly works.
    Filter(Common),
    /// Behavioral report: per-fact probabilities, compliance, answer origin.
    Evaluate(Common),
    /// Rank residual-stream components by first-order patching importance.
    Rank(Common),
    /// Cumulative joint-patching curve along the importance ranking.
    PatchCurve(Common),
    /// Joint vs summed patching effects along the ranking.
    Independence(Common),
    /// Head probes: attention statistics, OV suppression, scatter data.
    Heads(Common),
    /// Key/query enrichment curves for the analyzed heads.
    Enrich(Common),
    /// Distractor-injection attack driven by a token-preference scan.
    Attack(Common),
    /// Undo an attack by patching clean components back in.
    ReverseAttack(Common),
    /// Full pipeline: shared dataset, planted and trained branches.
    Report(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenWorld(c)
            | Command::RenderData(c)
            | Command::Train(c)
            | Command::Plant(c)
            | Command::Filter(c)
            | Command::Evaluate(c)
            | Command::Rank(c)
            | Command::PatchCurve(c)
            | Command::Independence(c)
            | Command::Heads(c)
            | Command::Enrich(c)
            | Command::Attack(c)
            | Command::ReverseAttack(c)
            | Command::Report(c) => c,
        }
    }
}

fn thread_count(common: &Common) -> Result<Option<usize>, CliError> {
    let n = match common.threads {
        Some(n) => Some(n),
        None => match std::env::var("FFCK_THREADS") {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| {
                CliError::Input(format!("FFCK_THREADS={s} is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(CliError::Input("--threads must be at least 1".into()));
    }
    Ok(n)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = thread_count(cli.command.common())? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenWorld(c) => commands::gen_world(c),
        Command::RenderData(c) => commands::render_data(c),
        Command::Train(c) => commands::train_cmd(c),
        Command::Plant(c) => commands::plant(c),
        Command::Filter(c) => commands::filter(c),
        Command::Evaluate(c) => commands::evaluate_cmd(c),
        Command::Rank(c) => commands::rank(c),
        Command::PatchCurve(c) => commands::patch_curve(c),
        Command::Independence(c) => commands::independence(c),
        Command::Heads(c) => commands::heads(c),
        Command::Enrich(c) => commands::enrich(c),
        Command::Attack(c) => commands::attack(c),
        Command::ReverseAttack(c) => commands::reverse_attack(c),
        Command::Report(c) => commands::report(c),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                std::process::exit(0);
            }
            // anything else is a usage problem: usage text + input-error code
            _ => {
                eprint!("{e}");
                std::process::exit(1);
            }
        },
    };
    match run(&cli) {
        Ok(()) => {}
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}
