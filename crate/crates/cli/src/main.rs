//! `restyle`: train and run two-stage story style transfer.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "restyle", version, about = "Discourse-level author-style transfer for stories")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: profile, file, `--set`, then
/// the dedicated flags.
#[derive(Debug, Clone, Args)]
struct GlobalArgs {
    /// Preset: zh-paper, en-paper or toy.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded kernels for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Clone, Args)]
struct CorpusArgs {
    /// JSONL corpus of `{"text", "style"}` records.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter a corpus (or generate the synthetic one) and report statistics.
    Prepare {
        /// Input corpus; omit together with `--synthetic`.
        #[arg(long = "in", required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        /// Generate the two-style synthetic corpus with this many stories per style.
        #[arg(long, conflicts_with = "input")]
        synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Drop stories longer than this many tokens.
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long, default_value_t = 1)]
        min_sentences: usize,
    },
    /// Build per-style keyword dictionaries.
    ExtractKeywords {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and freeze the style classifier.
    TrainClassifier {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Dictionaries; masked copies of the stories are added when given.
        #[arg(long)]
        dicts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-one transfer model.
    TrainStage1 {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        dicts: Option<PathBuf>,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
        /// Continue from `--out` if it holds a checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the stage-two keyword filler.
    TrainStage2 {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        dicts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Transfer a JSONL file of `{"source", "style"}` requests.
    Transfer {
        #[arg(long)]
        stage1: PathBuf,
        /// Filler checkpoint; without it stage one runs on unmasked text.
        #[arg(long)]
        stage2: Option<PathBuf>,
        #[arg(long)]
        dicts: Option<PathBuf>,
        /// Target style, unless a request names its own.
        #[arg(long)]
        target: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score outputs against their inputs.
    Evaluate {
        /// JSONL with an `output` (or `text`) field per line.
        #[arg(long)]
        outputs: PathBuf,
        /// JSONL with a `source` (or `text`) field per line, aligned with `--outputs`.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        classifier: PathBuf,
        /// Filler checkpoint whose encoder embeds tokens for semantic similarity.
        #[arg(long)]
        embedder: PathBuf,
        /// Average sentence BLEU instead of corpus BLEU.
        #[arg(long)]
        sentence_bleu: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project stylistic features of texts to 2-D (CSV plus PNG scatter plot).
    ProjectStyles {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Transfer output records to plot next to the corpus.
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
    },
}

/// Loss weights and stage-two removal for ablations.
#[derive(Debug, Clone, Args)]
struct AblationArgs {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Train stage one on unmasked text, for use without a filler.
    #[arg(long)]
    skip_stage2: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
