use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "xvfi", version, about = "Extreme video frame interpolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize intermediate frames between two input frames.
    Interpolate(InterpolateArgs),
    /// Approximate t-flows from a pair of bidirectional flows.
    Flows(FlowsArgs),
    /// PSNR, SSIM and tOF between ground-truth and predicted sequences.
    Metrics(MetricsArgs),
    /// Score candidate clips by occlusion and keep the top fraction.
    Curate(CurateArgs),
    /// Occlusion and flow-magnitude percentile table for a dataset.
    Stats(StatsArgs),
    /// Write a freshly initialized weight file.
    InitWeights(InitWeightsArgs),
    /// List the tensors of a weight file.
    InspectWeights(InspectWeightsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Inference,
    Training,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Ppm,
    Pfm,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub frame0: PathBuf,
    #[arg(long)]
    pub frame1: PathBuf,
    /// Comma-separated times in [0, 1], or `xN` for 1/N .. (N-1)/N.
    #[arg(long, default_value = "0.5")]
    pub t: String,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub scale_depth: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "inference")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "ppm")]
    pub format: FormatArg,
    /// Also write report.json with per-output diagnostics.
    #[arg(long)]
    pub report: bool,
    /// Also write t-flows (.flo) and CFR hole maps (.pgm) for every output.
    #[arg(long)]
    pub dump_flows: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FlowMethod {
    Cfr,
    Reversal,
    Linear,
}

#[derive(Debug, Args)]
pub struct FlowsArgs {
    #[arg(long)]
    pub f01: PathBuf,
    #[arg(long)]
    pub f10: PathBuf,
    /// Importance logits for frame 0 as a single-channel PFM; zero if omitted.
    #[arg(long)]
    pub z01: Option<PathBuf>,
    #[arg(long)]
    pub z10: Option<PathBuf>,
    #[arg(long)]
    pub t: f32,
    #[arg(long, value_enum, default_value = "cfr")]
    pub method: FlowMethod,
    /// Output directory for ft0.flo and ft1.flo.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    /// Motion fields for tOF: consecutive ground-truth pairs, then
    /// consecutive predicted pairs. Block matching is used if omitted.
    #[arg(long, num_args = 1..)]
    pub flows: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 768)]
    pub patch: usize,
    #[arg(long, default_value_t = 65)]
    pub clip_len: usize,
    #[arg(long, default_value_t = 0.10)]
    pub top: f64,
    /// Number of patch columns, spread evenly across the frame.
    #[arg(long, default_value_t = 81, conflicts_with = "stride")]
    pub columns: usize,
    /// Number of patch rows, spread evenly down the frame.
    #[arg(long, default_value_t = 31, conflicts_with = "stride")]
    pub rows: usize,
    /// Fixed spatial stride instead of a column/row count.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub temporal_stride: usize,
    /// Keep overlapping clips.
    #[arg(long)]
    pub allow_overlap: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Row label; defaults to the manifest file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Module scale factor (2 or 4).
    #[arg(long = "M", default_value_t = 4)]
    pub scale_factor: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Zero the output convolutions of every prediction head.
    #[arg(long)]
    pub zero_heads: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectWeightsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}
