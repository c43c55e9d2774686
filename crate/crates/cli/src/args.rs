use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "STICKER_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "sticker", version, about = "Sticker response selection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of glyph stickers and keyword dialogs.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: MAP and R@k, optional sweep and similarity buckets.
    Eval(EvalArgs),
    /// Rank the candidates of one context.
    Rank(ContextArgs),
    /// Dump word and sticker-cell attention for one context.
    Attention(AttentionArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (defaults to $STICKER_DATA_DIR).
    #[arg(long, env = DATA_DIR_ENV)]
    pub out: PathBuf,
    /// Training contexts.
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    /// Held-out contexts written to test.jsonl.
    #[arg(long, default_value_t = 100)]
    pub test_pairs: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Sticker sets; each holds one sticker per class in its own style.
    #[arg(long, default_value_t = 4)]
    pub sets: usize,
    #[arg(long, default_value_t = 9)]
    pub negatives: usize,
    #[arg(long, default_value_t = 100)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus (defaults to $STICKER_DATA_DIR/train.jsonl).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory for the checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with [model] and [train] tables; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub max_utterances: Option<usize>,
    #[arg(long)]
    pub t_x: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Skip encoder pretraining: the conv stack starts from a fresh init.
    #[arg(long)]
    pub no_pretrain: bool,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Channels of the four conv stages, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub conv_channels: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Remove the emoji classification head and its loss.
    #[arg(long)]
    pub no_classify: bool,
    /// Replace the deep interaction network with a flat bypass.
    #[arg(long)]
    pub no_din: bool,
    /// Replace the fusion GRU branch with zeros.
    #[arg(long)]
    pub no_fusion_rnn: bool,
    /// Divide attention logits by sqrt(d).
    #[arg(long)]
    pub scaled_attention: bool,
    /// Softmax-normalize the pooled interaction weights.
    #[arg(long)]
    pub normalize_tau: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation corpus (defaults to $STICKER_DATA_DIR/test.jsonl).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Context lengths to re-evaluate with, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Bucket contexts by candidate SSIM and report R@1 per bucket.
    #[arg(long)]
    pub similarity_report: bool,
}

#[derive(Debug, Args)]
pub struct ContextArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub target: ContextArgs,
    /// Candidate slot to explain (defaults to the positive).
    #[arg(long)]
    pub candidate: Option<usize>,
}
