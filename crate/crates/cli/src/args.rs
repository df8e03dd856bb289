//! Command-line and config-file arguments. Every subcommand's flags can
//! also be given in a TOML section named after the subcommand; values on
//! the command line win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "moe-lpr",
    version,
    about = "Upcycle, post-pretrain and review MoE language models"
)]
pub struct Cli {
    /// TOML file with one section per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic original/expanded corpora.
    GenSynth(GenSynthArgs),
    /// Train a dense base model from scratch.
    Pretrain(PretrainArgs),
    /// Turn a dense checkpoint into an MoE checkpoint.
    Upcycle(UpcycleArgs),
    /// Stage 1: post-pretrain new experts and routers.
    Train(TrainArgs),
    /// Stage 2: review the routers with the LPR loss.
    Review(ReviewArgs),
    /// Per-language perplexity table.
    Eval(EvalArgs),
    /// Frozen-expert score statistics and expert loads.
    RouteStats(EvalArgs),
    /// Run the full comparison matrix on synthetic data.
    Experiment(ExperimentArgs),
}

impl Command {
    pub fn section(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::Pretrain(_) => "pretrain",
            Command::Upcycle(_) => "upcycle",
            Command::Train(_) => "train",
            Command::Review(_) => "review",
            Command::Eval(_) => "eval",
            Command::RouteStats(_) => "route-stats",
            Command::Experiment(_) => "experiment",
        }
    }
}

/// Fill every `None` field of `self` from `file`.
pub trait Merge {
    fn merge(self, file: Self) -> Self;
}

macro_rules! mergeable {
    ($ty:ident { $($field:ident),* $(,)? } $(flatten { $($nested:ident),* })?) => {
        impl Merge for $ty {
            fn merge(self, file: Self) -> Self {
                Self {
                    $($field: self.$field.or(file.$field),)*
                    $($($nested: self.$nested.merge(file.$nested),)*)?
                }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct GenSynthArgs {
    /// Output directory for pretrain, original, expanded, review and eval corpora.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training documents per language.
    #[arg(long)]
    pub docs: Option<usize>,
    /// Held-out documents per language.
    #[arg(long)]
    pub eval_docs: Option<usize>,
    /// Symbols per document.
    #[arg(long)]
    pub doc_len: Option<usize>,
    /// Add a third original-role language.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub held_out_language: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}
mergeable!(GenSynthArgs {
    out_dir,
    docs,
    eval_docs,
    doc_len,
    held_out_language,
    seed
});

/// Optimisation flags shared by the training subcommands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Floor of the cosine decay.
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// Warmup steps (default 1% of steps).
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Snapshot cadence in steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Where cadence snapshots are written.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Training log path (default `<out>.log.ndjson`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}
mergeable!(OptimArgs {
    steps,
    batch_size,
    seq_len,
    lr,
    min_lr,
    warmup,
    weight_decay,
    seed,
    checkpoint_every,
    checkpoint_dir,
    log
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PretrainArgs {
    /// Corpus (JSON lines with text, lang, role).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Seeds weight initialisation.
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
}
mergeable!(PretrainArgs { data, out, hidden, layers, heads, ffn_dim, max_seq_len, init_seed } flatten { optim });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct UpcycleArgs {
    /// Dense checkpoint.
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Experts per layer, the original FFN included.
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// `expert-copy` or `random`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}
mergeable!(UpcycleArgs {
    input,
    out,
    experts,
    top_k,
    init,
    seed
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Upcycled checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Expanded-language corpus; with `--one-stage` it may hold both roles.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Balance-loss weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Add LPR and replay to this stage.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub one_stage: Option<bool>,
    /// LPR weight (one-stage variant only).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Original:expanded document mix (one-stage variant only).
    #[arg(long)]
    pub replay_ratio: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
}
mergeable!(TrainArgs { model, data, out, alpha, one_stage, gamma, replay_ratio } flatten { optim });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ReviewArgs {
    /// Stage-1 checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Review corpus holding both original and expanded documents.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// LPR weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Original:expanded document mix, e.g. `1:2`.
    #[arg(long)]
    pub replay_ratio: Option<String>,
    /// Accepted only to explain why it is refused.
    #[arg(long, hide = true, num_args = 0..=1, default_missing_value = "")]
    pub alpha: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
}
mergeable!(ReviewArgs { model, data, out, gamma, replay_ratio, alpha } flatten { optim });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Tagged evaluation corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}
mergeable!(EvalArgs {
    model,
    data,
    out,
    seq_len,
    batch_size
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ExperimentArgs {
    /// Directory for the report, CSVs, logs and checkpoints.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Multiplies every stage's step count.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Run cells one after another.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sequential: Option<bool>,
    /// Add a third original-role language that review never sees.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub held_out_language: Option<bool>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save each cell's checkpoint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub save_checkpoints: Option<bool>,
}
mergeable!(ExperimentArgs {
    out_dir,
    scale,
    sequential,
    held_out_language,
    experts,
    seed,
    save_checkpoints
});
