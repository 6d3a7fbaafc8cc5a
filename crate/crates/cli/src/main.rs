//! `embgate`: synthetic data, training, evaluation and inspection of
//! embedding-injection models.
//!
//! Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 non-finite loss.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use embgate_core::metrics::DEFAULT_ZERO_THRESHOLD;
use embgate_core::model::InjectionMode;
use embgate_core::synth::SynthSpec;

/// Bad flags, config files or option combinations.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "embgate",
    version,
    about = "Gated injection of word embeddings into a small BERT encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write checkpoints plus an averaged report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<InjectionMode>,
        #[arg(long)]
        layer: Option<usize>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the gate pinned at zero (debugging).
        #[arg(long)]
        freeze_gate: bool,
    },
    /// Evaluate a checkpoint on a TSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Adds the synonym/antonym/neither breakdown.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Overrides the embeddings recorded in the checkpoint.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic paraphrase task.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 200)]
        synonym_pairs: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        positive_rate: f64,
        #[arg(long, default_value_t = 16)]
        ext_dim: usize,
    },
    /// Injection parameter counts for hidden size D and embedding width E.
    Paramcount { hidden: usize, ext_dim: usize },
    /// Histogram and summary of a gated checkpoint's gate vector.
    Gates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = DEFAULT_ZERO_THRESHOLD)]
        threshold: f64,
        /// CSV path; defaults to gates.csv in the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print pieces, alignment and injection rows for a sentence pair.
    AlignDebug {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        first: String,
        second: String,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            mode,
            layer,
            seed,
            embeddings,
            lexicon,
            out,
            freeze_gate,
        } => commands::train(
            &config,
            commands::TrainOverrides {
                mode,
                layer,
                seed,
                embeddings,
                lexicon,
                out,
                freeze_gate,
            },
        ),
        Command::Eval {
            checkpoint,
            data,
            lexicon,
            embeddings,
            out,
        } => commands::eval(
            &checkpoint,
            &data,
            lexicon.as_deref(),
            embeddings.as_deref(),
            out.as_deref(),
        ),
        Command::Synth {
            out,
            pairs,
            vocab_size,
            synonym_pairs,
            noise,
            seed,
            positive_rate,
            ext_dim,
        } => {
            let spec = SynthSpec {
                pairs,
                vocab_size,
                synonym_pairs,
                noise,
                seed,
                positive_rate,
                ext_dim,
                ..SynthSpec::default()
            };
            commands::synth(&spec, &out)
        }
        Command::Paramcount { hidden, ext_dim } => commands::paramcount(hidden, ext_dim),
        Command::Gates {
            checkpoint,
            bins,
            threshold,
            out,
        } => commands::gates(&checkpoint, bins, threshold, out.as_deref()),
        Command::AlignDebug {
            vocab,
            embeddings,
            max_len,
            first,
            second,
        } => commands::align_debug(&vocab, embeddings.as_deref(), &first, &second, max_len),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use embgate_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(E::NonFinite { .. }) => 3,
        Some(E::Config(_) | E::Invalid(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
