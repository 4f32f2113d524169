//! `raggate`: train and evaluate RL-gated retrieval for a FAQ chatbot.
//!
//! Exit codes: 0 success, 2 validation/configuration error, 3 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raggate_core::embedding::LossKind;
use raggate_core::error::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "raggate",
    version,
    about = "RL-gated retrieval for FAQ chatbots"
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Gating mode: all-fetch, simthr, simthr-policy, or policy-only.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Similarity threshold for the STATIC shortcut.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PathArgs {
    /// FAQ corpus JSON (defaults to the bundled fixture corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,

    /// Training session scripts JSON (defaults to the bundled sessions).
    #[arg(long)]
    sessions: Option<PathBuf>,

    /// Test session scripts JSON (defaults to the bundled test session).
    #[arg(long)]
    test_sessions: Option<PathBuf>,

    /// Embedding fixture file with pinned base vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,

    /// Trained head file (defaults to <out>/head.json).
    #[arg(long)]
    head: Option<PathBuf>,

    /// Trained policy file (defaults to <out>/policy.json).
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the retrieval projection head on synthetic paraphrase pairs.
    EmbedTrain {
        #[command(flatten)]
        paths: PathArgs,
        /// Contrastive loss: infonce or triplet.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// SGD learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Training paraphrases per FAQ per pair kind.
        #[arg(long)]
        per_faq: Option<usize>,
        /// Embedding dimension of the fallback embedder.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Evaluate a trained head against the identity baseline.
    EmbedEval {
        #[command(flatten)]
        paths: PathArgs,
    },
    /// Generate rollouts and train the fetch/no-fetch policy.
    PolicyTrain {
        #[command(flatten)]
        paths: PathArgs,
        /// Rollout/update rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Trajectories per session per round.
        #[arg(long)]
        samples: Option<usize>,
        /// Training epochs per round.
        #[arg(long)]
        epochs: Option<usize>,
        /// Policy SGD learning rate.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Run the test sessions under one gating mode and export the ledger.
    Simulate {
        #[command(flatten)]
        paths: PathArgs,
    },
    /// Compare ALL_FETCH vs SIMTHR vs SIMTHR_POLICY token usage.
    Report {
        #[command(flatten)]
        paths: PathArgs,
    },
    /// Interactive chat against the simulated pipeline.
    Repl {
        #[command(flatten)]
        paths: PathArgs,
    },
}

fn parse_loss(value: &str) -> Result<LossKind> {
    match value.to_ascii_lowercase().as_str() {
        "infonce" => Ok(LossKind::Infonce),
        "triplet" => Ok(LossKind::Triplet),
        other => Err(Error::Validation(format!(
            "unknown loss \"{other}\" (expected infonce or triplet)"
        ))),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        config.mode = mode.parse()?;
    }
    if let Some(threshold) = cli.threshold {
        config.threshold = threshold;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }

    let paths = match &cli.command {
        Command::EmbedTrain { paths, .. }
        | Command::EmbedEval { paths }
        | Command::PolicyTrain { paths, .. }
        | Command::Simulate { paths }
        | Command::Report { paths }
        | Command::Repl { paths } => paths,
    };
    if paths.corpus.is_some() {
        config.corpus = paths.corpus.clone();
    }
    if paths.sessions.is_some() {
        config.sessions = paths.sessions.clone();
    }
    if paths.test_sessions.is_some() {
        config.test_sessions = paths.test_sessions.clone();
    }
    if paths.embeddings.is_some() {
        config.embeddings = paths.embeddings.clone();
    }
    if paths.head.is_some() {
        config.head = paths.head.clone();
    }
    if paths.policy.is_some() {
        config.policy = paths.policy.clone();
    }

    match &cli.command {
        Command::EmbedTrain {
            loss,
            epochs,
            lr,
            per_faq,
            dim,
            ..
        } => {
            if let Some(loss) = loss {
                config.loss = parse_loss(loss)?;
            }
            if let Some(epochs) = epochs {
                config.epochs = *epochs;
            }
            if let Some(lr) = lr {
                config.learning_rate = *lr;
            }
            if let Some(per_faq) = per_faq {
                config.per_faq = *per_faq;
            }
            if let Some(dim) = dim {
                config.dimension = *dim;
            }
        }
        Command::PolicyTrain {
            rounds,
            samples,
            epochs,
            lr,
            ..
        } => {
            if let Some(rounds) = rounds {
                config.rounds = *rounds;
            }
            if let Some(samples) = samples {
                config.samples = *samples;
            }
            if let Some(epochs) = epochs {
                config.policy_epochs = *epochs;
            }
            if let Some(lr) = lr {
                config.policy_learning_rate = *lr;
            }
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::EmbedTrain { .. } => commands::cmd_embed_train(&config),
        Command::EmbedEval { .. } => commands::cmd_embed_eval(&config),
        Command::PolicyTrain { .. } => commands::cmd_policy_train(&config),
        Command::Simulate { .. } => commands::cmd_simulate(&config),
        Command::Report { .. } => commands::cmd_report(&config),
        Command::Repl { .. } => commands::cmd_repl(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
