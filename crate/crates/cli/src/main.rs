//! `lvc`: encode, decode, train and evaluate the learned P-frame codec.
//!
//! Exit codes: 0 on success, 1 on internal errors, 2 on usage or input
//! errors. Statistics go to stdout as single-line `key=value` records.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lvc", version, about = "Learned P-frame video codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a Y4M file or PNG directory into a bitstream.
    Encode(EncodeArgs),
    /// Decode a bitstream to a Y4M file (`*.y4m`) or a PNG directory.
    Decode(DecodeArgs),
    /// Train one weight set with the clip-length curriculum.
    Train(TrainArgs),
    /// Encode clips with several weight sets and write RD points as CSV and SVG.
    Eval(EvalArgs),
    /// BD-rate of a test RD CSV against an anchor RD CSV.
    Bdrate(BdrateArgs),
}

/// External still-image coder for I-frames. Each command is split on
/// whitespace; `{input}` and `{output}` are replaced by file paths.
#[derive(Args, Debug, Clone, Default)]
pub struct IntraArgs {
    #[arg(long, requires = "intra_decode")]
    pub intra_encode: Option<String>,
    #[arg(long)]
    pub intra_decode: Option<String>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Must match the λ-index stored in the weights when given.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..5))]
    pub lambda_index: Option<u8>,
    /// Frames per GOP; the whole sequence by default.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gop: Option<u64>,
    /// Zero both prediction paths (MVP and RP).
    #[arg(long)]
    pub no_predict: bool,
    #[command(flatten)]
    pub intra: IntraArgs,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub intra: IntraArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training clips (Y4M files or PNG directories); synthetic clips when
    /// none are given.
    #[arg(long)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(0..5))]
    pub lambda_index: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub iters: u64,
    /// Maximum P-frames per training clip.
    #[arg(long, default_value_t = 5)]
    pub pframes: usize,
    /// Iterations between clip-length increases.
    #[arg(long, default_value_t = 500)]
    pub step_iters: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Random square crop applied to every training clip.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Append an MS-SSIM fine-tuning stage of iters/5 iterations.
    #[arg(long)]
    pub ms_ssim_finetune: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Number and size of synthetic clips when no input is given.
    #[arg(long, default_value_t = 16)]
    pub synthetic_clips: usize,
    #[arg(long, default_value_t = 32)]
    pub synthetic_size: usize,
    /// Print a stats line every this many iterations.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// One weight set per RD point.
    #[arg(long, required = true)]
    pub weights: Vec<PathBuf>,
    /// CSV path; a PSNR plot is written next to it with an `svg` extension.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gop: Option<u64>,
    #[command(flatten)]
    pub intra: IntraArgs,
}

#[derive(Args, Debug)]
pub struct BdrateArgs {
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

/// Bad arguments or inputs detected by the CLI itself.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<lvc_core::Error>() {
        Some(lvc_core::Error::Shape(_) | lvc_core::Error::NonFinite(_)) | None => 1,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Encode(a) => commands::encode(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bdrate(a) => commands::bdrate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
