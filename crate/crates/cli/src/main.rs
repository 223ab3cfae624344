//! `pathgrade` command-line driver.

mod archive;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pathgrade", version, about = "Biopsy slide analysis pipeline")]
pub struct Cli {
    /// JSON pipeline configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Segment tissue and pen marks of a slide pack.
    Segment(SegmentArgs),
    /// Turn pen marks into a label mask.
    Digitize(DigitizeArgs),
    /// Tile a slide into labelled patches and descriptors.
    Extract(ExtractArgs),
    /// Train a patch classifier ensemble.
    TrainPatch(TrainPatchArgs),
    /// Write per-patch probabilities for every member.
    PredictPatch(PredictPatchArgs),
    /// Train the detection, length and grading heads.
    TrainSlide(TrainSlideArgs),
    /// Slide-level predictions from patch probabilities.
    PredictSlide(PredictSlideArgs),
    /// Compare predictions with reference labels.
    Evaluate(EvaluateArgs),
    /// Draw the confidence overlay of a slide.
    Render(RenderArgs),
    /// Run every stage on a synthetic dataset directory.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub benign: usize,
    #[arg(long, default_value_t = 0)]
    pub isup1: usize,
    #[arg(long, default_value_t = 0)]
    pub isup2: usize,
    #[arg(long, default_value_t = 0)]
    pub isup3: usize,
    #[arg(long, default_value_t = 0)]
    pub isup4: usize,
    #[arg(long, default_value_t = 0)]
    pub isup5: usize,
    /// Core length range in mm, `min,max`.
    #[arg(long, value_parser = parse_pair::<f64>)]
    pub core_length_mm: Option<(f64, f64)>,
    /// Cores per synthetic man, `min,max`.
    #[arg(long, value_parser = parse_pair::<usize>)]
    pub cores_per_man: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    pub slidepack: PathBuf,
    #[arg(long)]
    pub out_tissue: PathBuf,
    #[arg(long)]
    pub out_pen: PathBuf,
}

#[derive(Args, Debug)]
pub struct DigitizeArgs {
    pub slidepack: PathBuf,
    #[arg(long)]
    pub tissue: PathBuf,
    #[arg(long)]
    pub pen: PathBuf,
    #[arg(long)]
    pub grade_coded: bool,
    /// Skip label growth and the uncertainty margin.
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    pub slidepack: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Tissue mask; segmented from the slide when absent.
    #[arg(long)]
    pub tissue: Option<PathBuf>,
    /// Pen mask; segmented from the slide when absent.
    #[arg(long)]
    pub pen: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stride: Option<u32>,
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long)]
    pub level: Option<u32>,
    /// Write descriptors only, without patch images.
    #[arg(long)]
    pub features_only: bool,
    /// Slide id (default: the slide pack directory name).
    #[arg(long)]
    pub slide_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainPatchArgs {
    #[arg(long, value_parser = parse_stage)]
    pub stage: pathgrade::patch_model::Stage,
    /// Patch archive root.
    #[arg(long)]
    pub patches: PathBuf,
    /// Reference records (JSONL) giving each slide's Gleason patterns.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub members: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictPatchArgs {
    /// Directory written by train-patch.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainSlideArgs {
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub gra: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub threshold_sensitivity: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictSlideArgs {
    #[arg(long)]
    pub heads: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub gra: PathBuf,
    /// Recalibrate the detection threshold to this sensitivity.
    #[arg(long, conflicts_with = "threshold")]
    pub threshold_sensitivity: Option<f64>,
    /// Fixed detection threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub group_isup: bool,
    /// Ratings matrix JSON for per-rater kappas.
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    /// Threshold for the fixed operating row.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    pub slidepack: PathBuf,
    /// `detection.jsonl,grading.jsonl`.
    #[arg(long, value_parser = parse_pair::<PathBuf>)]
    pub probs: (PathBuf, PathBuf),
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 16)]
    pub downsample: u32,
    /// Also write the bare confidence mask.
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    #[arg(long)]
    pub slide_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pair<T>(s: &str) -> Result<(T, T), String>
where
    T: std::str::FromStr + Clone + Send + Sync + 'static,
    T::Err: std::fmt::Display,
{
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `min,max`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<T>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn parse_stage(s: &str) -> Result<pathgrade::patch_model::Stage, String> {
    s.parse().map_err(|e: pathgrade::Error| e.to_string())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| {
            c.downcast_ref::<pathgrade::Error>()
                .map(pathgrade::Error::kind)
        })
        .or_else(|| {
            e.chain()
                .find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .or_else(|| {
            e.chain()
                .find_map(|c| c.downcast_ref::<serde_json::Error>().map(|_| "json"))
        })
        .unwrap_or("usage")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ").replace('"', "'");
            eprintln!("error: kind={} message=\"{message}\"", error_kind(&e));
            ExitCode::from(2)
        }
    }
}
