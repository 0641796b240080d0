//! `iriskit`: train, run and score the iris segmentation and localization networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Iris segmentation, localization, evaluation and matching.
#[derive(Debug, Parser)]
#[command(name = "iriskit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a segmentation or localization network from a manifest.
    Train(TrainArgs),
    /// Segment one image and write the binary mask.
    InferSeg(InferSegArgs),
    /// Segment, crop around the iris and write inner and outer boundary masks.
    Localize(LocalizeArgs),
    /// Score predicted masks against ground truth and write a JSON report.
    Eval(EvalArgs),
    /// Pick the binarization threshold with the lowest mean E1 on a manifest.
    SweepThreshold(SweepArgs),
    /// Run the 5-fold nearest-neighbour identification protocol.
    Match(MatchArgs),
    /// Turn a scores CSV into a rank-sum table.
    Rank(RankArgs),
    /// Draw masks and boundaries over an image.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// `seg` (1-channel iris mask) or `loc` (inner and outer boundary masks).
    #[arg(long, value_parser = ["seg", "loc"])]
    task: String,
    /// Output weight container; a `.json` sidecar and `.history.csv` are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0001, value_parser = positive)]
    lr: f64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Container whose encoder tensors initialize the network.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Square network input side (a multiple of 32).
    #[arg(long, default_value_t = 224, value_parser = clap::value_parser!(u64).range(32..))]
    input_size: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Weight of a cross-entropy term added to the dice loss.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    bce_weight: f64,
    /// Disable flip, rotation, zoom and brightness augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Where `loc` training crops are centred: the `--seg-model` output or each record's `seg_mask`.
    #[arg(long, value_parser = ["predicted", "ground-truth"], default_value = "predicted")]
    crop_source: String,
    /// Segmentation model for `--crop-source predicted`.
    #[arg(long)]
    seg_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferSegArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output mask PNG (0 background, 255 iris).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[arg(long)]
    seg_model: PathBuf,
    #[arg(long)]
    loc_model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_inner: PathBuf,
    #[arg(long)]
    out_outer: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    threshold: f64,
    /// Crop side as a multiple of the segmented iris extent.
    #[arg(long, default_value_t = 1.5, value_parser = positive)]
    margin: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted segmentation masks; files are paired with `--gt-dir` by name.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
    /// Predicted and ground-truth inner-boundary mask directories.
    #[arg(long, num_args = 2, value_names = ["PRED", "GT"], requires = "outer_dir")]
    inner_dir: Option<Vec<PathBuf>>,
    /// Predicted and ground-truth outer-boundary mask directories.
    #[arg(long, num_args = 2, value_names = ["PRED", "GT"], requires = "inner_dir")]
    outer_dir: Option<Vec<PathBuf>>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Validation manifest; every record needs a `seg_mask`.
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV `threshold,mean_e1`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Segment with this model instead of reading each record's `seg_mask`.
    #[arg(long)]
    seg_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// CSV with header `method,metric,dataset,score,direction`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    /// Segmentation mask to tint.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, requires = "outer")]
    inner: Option<PathBuf>,
    #[arg(long, requires = "inner")]
    outer: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn number(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("`{s}` is not finite"));
    }
    Ok(v)
}

fn positive(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} must not be negative"))
    }
}

fn unit_open(s: &str) -> Result<f64, String> {
    let v = number(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("threshold {v} is outside (0, 1)"))
    }
}

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or missing inputs, caught before anything was written.
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("error: a command is required (see `iriskit --help`)");
                return ExitCode::from(2);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::InferSeg(a) => commands::infer_seg(a),
        Command::Localize(a) => commands::localize(a),
        Command::Eval(a) => commands::eval(a),
        Command::SweepThreshold(a) => commands::sweep(a),
        Command::Match(a) => commands::matching(a),
        Command::Rank(a) => commands::rank(a),
        Command::Overlay(a) => commands::overlay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}
