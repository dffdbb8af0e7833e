//! Stage runner for reproducible experiments. All heavy lifting lives in the
//! library; this binary parses arguments, loads the config and dispatches.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grc::pipeline::{ExperimentConfig, RunContext, Stage};

#[derive(Parser)]
#[command(
    name = "grc",
    about = "Semantic-ID generative recommendation with reflect-and-correct decoding",
    version
)]
struct Cli {
    /// Experiment config (TOML). Defaults match a desk-scale synthetic run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory holding per-config run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite artifacts whose recorded inputs no longer match.
    #[arg(long, global = true)]
    force: bool,

    /// Cap worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (or ingest the configured CSVs).
    GenData,
    /// Fit the residual quantizer and assign item codes.
    Tokenize,
    /// Train the one-pass backbone on next-item prediction.
    Pretrain,
    /// Annotate beam drafts into the reflect-and-correct template corpus.
    BuildSftCorpus,
    /// Fine-tune on the template corpus.
    Sft,
    /// GRPO reinforcement learning over full episodes.
    Rl,
    /// Decode the evaluation users with entropy-guided reflection scheduling.
    Decode,
    /// Compute retrieval and reflection-quality metrics.
    Eval,
    /// Run every stage in order.
    RunAll,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::GenData => vec![Stage::GenData],
            Command::Tokenize => vec![Stage::Tokenize],
            Command::Pretrain => vec![Stage::Pretrain],
            Command::BuildSftCorpus => vec![Stage::BuildSftCorpus],
            Command::Sft => vec![Stage::Sft],
            Command::Rl => vec![Stage::Rl],
            Command::Decode => vec![Stage::Decode],
            Command::Eval => vec![Stage::Eval],
            Command::RunAll => Stage::ALL.to_vec(),
        }
    }
}

fn run(cli: Cli) -> grc::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| grc::GrcError::Config(format!("--threads: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = RunContext::new(config, &cli.out, cli.force)?;
    println!("run directory: {}", ctx.dir.display());
    for stage in cli.command.stages() {
        let started = std::time::Instant::now();
        ctx.run(stage)?;
        println!("{:<18} done in {:.1}s", stage.name(), started.elapsed().as_secs_f64());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
