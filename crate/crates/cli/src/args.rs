use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "taper-calib", version, about = "Satellite precipitation calibration against station networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand accepts.
#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flat `key=value` file; keys are long flag names, command-line flags win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scene.
    Synth(SynthArgs),
    /// Linearly interpolate a series to a finer time step.
    InterpTime(InterpArgs),
    /// Resample grids to a new resolution or onto a reference geometry.
    Resample(ResampleArgs),
    /// Find the window holding the most stations and crop to it.
    Crop(CropArgs),
    /// Min-max normalize with upper truncation, or undo it.
    Normalize(NormalizeArgs),
    /// Distribution summary per input and pooled.
    Stats(StatsArgs),
    /// Train a calibrator and write a checkpoint.
    Train(TrainCmdArgs),
    /// Apply a trained calibrator.
    Calibrate(CalibrateArgs),
    /// Verification metrics of a prediction against a reference.
    Eval(EvalArgs),
    /// 24-hour precipitation level of each value.
    Level(LevelArgs),
    /// Repeat seeded synthetic runs over a parameter grid.
    Sweep(SweepArgs),
    /// Run every stage end to end.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    pub lat_top: f64,
    #[arg(long, default_value_t = 100.0, allow_negative_numbers = true)]
    pub lon_left: f64,
    /// Pixel size in degrees.
    #[arg(long, default_value_t = 0.1)]
    pub pixel_size: f64,
    #[arg(long, default_value_t = 6)]
    pub bumps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub amp_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub amp_max: f64,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 8.0)]
    pub sigma_max: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub gain: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub offset: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 60)]
    pub stations: usize,
    #[arg(long, default_value_t = 0.0)]
    pub station_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub zero_fraction: f64,
    /// Stations placed in the corners, away from a central cluster.
    #[arg(long, default_value_t = 0)]
    pub isolated: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub advect_row: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub advect_col: f64,
    #[arg(long, default_value_t = 3600)]
    pub frame_step: i64,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3600)]
    pub source_step: i64,
    #[arg(long, default_value_t = 1800)]
    pub target_step: i64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Nearest,
    Bilinear,
    Bicubic,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output pixel size in degrees.
    #[arg(long, conflicts_with = "like", required_unless_present = "like")]
    pub resolution: Option<f64>,
    /// Match this grid's geometry instead.
    #[arg(long)]
    pub like: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Bilinear)]
    pub method: MethodArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CropMode {
    Global,
    #[value(alias = "per_frame")]
    PerFrame,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub stations: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = CropMode::Global)]
    pub mode: CropMode,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Hourly,
    Daily,
}

#[derive(Debug, Args)]
pub struct NormArgs {
    #[arg(long, value_enum, default_value_t = Preset::Hourly)]
    pub preset: Preset,
    /// Overrides the preset's upper value.
    #[arg(long)]
    pub x_max: Option<f64>,
    /// Keep values above the upper value instead of truncating.
    #[arg(long)]
    pub no_clamp: bool,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub norm: NormArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub inverse: bool,
    /// Also write an 8-bit PGM quick-look of the first frame.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Kv,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub drop_zeros: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Affine,
    Mlp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Exponential,
    Linear,
    #[value(alias = "power_law")]
    PowerLaw,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Haversine,
    Euclidean,
    Pixels,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OtherLossArg {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Stations,
    #[value(alias = "full_grid")]
    FullGrid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Affine)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Feed the 3x3 neighborhood mean to the MLP as well.
    #[arg(long)]
    pub neighborhood: bool,
    #[arg(long, value_enum, default_value_t = KernelArg::Exponential)]
    pub kernel: KernelArg,
    /// Kernel decay (per distance unit of `--metric`).
    #[arg(long, default_value_t = 0.05)]
    pub kernel_param: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::Haversine)]
    pub metric: MetricArg,
    #[arg(long, default_value_t = 1.0)]
    pub mix_taper: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mix_other: f64,
    #[arg(long, value_enum, default_value_t = OtherLossArg::L2)]
    pub other_loss: OtherLossArg,
    #[arg(long, value_enum, default_value_t = DomainArg::FullGrid)]
    pub other_domain: DomainArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    /// Epochs without improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
}

#[derive(Debug, Args)]
pub struct TrainCmdArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub satellite: PathBuf,
    /// Reference grids, required by the full-grid loss term.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Station CSV; one per frame, or one shared by all frames.
    #[arg(long = "stations", required = true)]
    pub stations: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss history as TSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference grid(s) on the prediction's geometry.
    #[arg(long, required_unless_present = "stations")]
    pub truth: Option<PathBuf>,
    /// Score at station pixels instead of the full grid.
    #[arg(long, conflicts_with = "truth")]
    pub stations: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Adds PSNR and SSIM with this data range (grid references only).
    #[arg(long)]
    pub data_range: Option<f64>,
    /// Adds 24-hour level classification scores.
    #[arg(long)]
    pub levels: bool,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct LevelArgs {
    #[command(flatten)]
    pub common: Common,
    /// 24-hour accumulation in mm.
    #[arg(long, required = true)]
    pub value: Vec<f64>,
    /// Print the level name next to the number.
    #[arg(long)]
    pub names: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepParamArg {
    #[value(alias = "kernel_param")]
    KernelParam,
    #[value(alias = "mix_taper")]
    MixTaper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepFormat {
    Tsv,
    Table,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub norm: NormArgs,
    #[arg(long, value_enum)]
    pub param: SweepParamArg,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Offset the isolated stations by this many station standard deviations.
    #[arg(long, default_value_t = 0.0)]
    pub corrupt_sigma: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, value_enum, default_value_t = SweepFormat::Tsv)]
    pub format: SweepFormat,
    /// Drop the std column when every std is below 0.05 (table format).
    #[arg(long)]
    pub elide_std: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub norm: NormArgs,
    #[arg(long)]
    pub satellite: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long = "stations", required = true)]
    pub stations: Vec<PathBuf>,
    /// Interpolate the satellite series from this step before aligning.
    #[arg(long)]
    pub source_step: Option<i64>,
    #[arg(long, default_value_t = 1800)]
    pub target_step: i64,
    /// Resample the satellite grids (onto the truth geometry if given).
    #[arg(long, value_enum)]
    pub resample: Option<MethodArg>,
    #[arg(long)]
    pub resolution: Option<f64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Write intermediates, checkpoint and report here.
    #[arg(long, value_name = "DIR")]
    pub artifacts: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    pub format: Format,
}
