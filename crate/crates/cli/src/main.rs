use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epistyle::config::Config;
use epistyle::pipeline::{Pipeline, StageStatus};

#[derive(Parser)]
#[command(name = "epistyle", version, about = "Episode-embedding authorship attribution across forums")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config with [corpus] [tokenizer] [graph] [model] [train] [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding one subdirectory per stage.
    #[arg(long, global = true, default_value = "work")]
    work: PathBuf,
    /// Skip a stage whose manifest matches the current inputs and config.
    #[arg(long, global = true)]
    skip_if_fresh: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-market corpus with planted migrants.
    Synth,
    /// Load the JSONL post files named in [corpus].
    Ingest,
    /// Normalise post bodies.
    Preprocess,
    /// Split each market at its median timestamp.
    Split,
    /// Cut train and test posts into episodes.
    Episodes,
    /// Find cross-market users sharing a PGP key.
    PgpPairs,
    /// Build the per-market user/subforum/thread/post graphs.
    BuildGraph,
    /// Sample meta-path walks.
    Walk,
    /// Train skip-gram node embeddings on the walks.
    GraphEmbed,
    /// Train the character or BPE vocabulary.
    TrainTokenizer,
    /// Train the episode embedding model.
    Train,
    /// Retrieval metrics on the test period.
    Eval,
    /// Cross-market sybil candidates.
    Sybil,
    /// Integrated-gradients token attributions.
    Attribute,
    /// Paired signed-rank test between two metrics files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// `mrr` or `recall@k`.
        #[arg(long, default_value = "mrr")]
        metric: String,
    },
    /// Every stage from synth (or ingest) to attribute.
    Run,
}

fn run(cli: Cli) -> epistyle::Result<()> {
    let mut cfg = Config::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    let mut p = Pipeline::new(&cli.common.work, cfg);
    p.skip_if_fresh = cli.common.skip_if_fresh;
    let status = match &cli.command {
        Command::Synth => p.synth()?,
        Command::Ingest => p.ingest()?,
        Command::Preprocess => p.preprocess()?,
        Command::Split => p.split()?,
        Command::Episodes => p.episodes()?,
        Command::PgpPairs => p.pgp_pairs()?,
        Command::BuildGraph => p.build_graph()?,
        Command::Walk => p.walk()?,
        Command::GraphEmbed => p.graph_embed()?,
        Command::TrainTokenizer => p.train_tokenizer()?,
        Command::Train => p.train()?,
        Command::Eval => p.eval()?,
        Command::Sybil => p.sybil()?,
        Command::Attribute => p.attribute()?,
        Command::Compare { a, b, metric } => p.compare(a, b, metric)?,
        Command::Run => {
            let metrics = p.run_all()?;
            println!("{}", metrics.display());
            return Ok(());
        }
    };
    if status == StageStatus::Skipped {
        println!("up to date");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
