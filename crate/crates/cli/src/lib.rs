//! The `rac` command line: one subcommand per pipeline stage, each writing
//! into its own run directory, plus the annotation HTTP server.

pub mod commands;
pub mod config;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "rac", version, about = "Read-Attend-Code medical code prediction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON object of settings; explicit flags take precedence over it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; must be new or empty. Defaults to runs/<command>-<timestamp>.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a planted-signal dataset: documents.jsonl, codes.tsv, splits.json.
    GenSynthetic(SyntheticFlags),
    /// Build the vocabulary from the training split.
    Preprocess(PreprocessArgs),
    /// Train skip-gram embeddings on the training split.
    PretrainEmbeddings(PretrainArgs),
    /// Write the sentence-permuted training set.
    Augment(AugmentArgs),
    Train(TrainArgs),
    /// Print a metrics report for a model or stored predictions.
    Evaluate(EvaluateArgs),
    /// Score documents; optionally dump top attention positions.
    Predict(PredictArgs),
    /// Run the annotation HTTP server.
    Serve(ServeArgs),
    /// Agreement report from annotation files and optional predictions.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SyntheticFlags {
    #[arg(long, visible_alias = "docs")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_docs: Option<usize>,
    #[arg(long, visible_alias = "codes")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_codes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_labels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_labels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_noise: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_noise: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zipf_exponent: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Directory holding documents.jsonl, codes.tsv and splits.json (a gen-synthetic run).
    #[arg(long, value_name = "DIR", conflicts_with_all = ["documents", "codes", "splits"])]
    pub from: Option<PathBuf>,
    #[arg(long, requires_all = ["codes", "splits"])]
    pub documents: Option<PathBuf>,
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[command(flatten)]
    pub flags: PreprocessFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct PreprocessFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Preprocess run directory or its data.json.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: PretrainFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: AugmentFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment_fold: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Embedding checkpoint from pretrain-embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Pre-augmented training documents (from `augment`) used as is.
    #[arg(long)]
    pub train_documents: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct ModelFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_x: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_y: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sam_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_kernel: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reader_conv_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_title_queries: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_bias: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_padding: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swa_interval_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swa_from_first_epoch: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment_fold: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false, args = ["model", "predictions"])]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Score file written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub flags: EvaluateFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateFlags {
    /// train, val or test.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// auto, ranking or agreement; auto picks agreement for 0/1 scores.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// label or document.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_axis: Option<String>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Documents to score; defaults to the split named by --split.
    #[arg(long)]
    pub documents: Option<PathBuf>,
    #[command(flatten)]
    pub flags: PredictFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Codes per note, and positions per code, in attention.jsonl; 0 skips it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model scores for the agreement report's model row.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Annotation log; defaults to annotations.jsonl in the run directory.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Static files served at `/` (the browser front end).
    #[arg(long)]
    pub assets: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ServeFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct ServeFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_axis: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub codes: PathBuf,
    /// Annotation log of the coders being assessed.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Annotation log whose codes serve as the reference for each note.
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub flags: CompareFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct CompareFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_axis: Option<String>,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
