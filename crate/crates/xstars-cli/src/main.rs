//! `xstars`: synthesize paired corpora, pretrain, adapt and probe.

mod commands;
mod config;
mod probe;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "XSTARS_OUTPUT_ROOT";

/// A usage or configuration problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "xstars", version, about = "Multi-sensor self-supervised pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural base scenes to feed `synth`.
    Scenes(ScenesArgs),
    /// Build a paired multi-sensor corpus from base images.
    Synth(SynthArgs),
    /// Render a labeled scene dataset per sensor for probing.
    Dataset(DatasetArgs),
    /// Pretrain from scratch on a paired corpus.
    Pretrain(TrainArgs),
    /// Adapt a pretrained checkpoint to a new sensor with a frozen teacher.
    Continual(ContinualArgs),
    /// Probe a frozen checkpoint.
    Probe(ProbeArgs),
    /// Aggregate probe reports into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct ScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of base RGB images.
    #[arg(long)]
    base: PathBuf,
    /// Comma-separated built-in profiles (s6, s2, ls, identity).
    #[arg(long, value_delimiter = ',')]
    profiles: Vec<String>,
    /// Run configuration supplying `data.profiles`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Footprint side in base pixels; defaults to the largest square.
    #[arg(long)]
    footprint_side: Option<usize>,
    /// Per-sensor crop jitter in base pixels.
    #[arg(long, default_value_t = 0)]
    jitter: usize,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_delimiter = ',')]
    profiles: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 96)]
    base_side: usize,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated scene classes; all by default.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Also write segmentation masks on a cells x cells grid.
    #[arg(long)]
    segmentation_cells: Option<usize>,
}

#[derive(Args, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    input_side: Option<usize>,
    /// Comma-separated sensor ids.
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<String>>,
    /// Any config key, e.g. `--set train.msad_tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainOverrides,
    /// Continue training from a checkpoint of this run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ContinualArgs {
    /// Checkpoint of the pretrained model that becomes the frozen teacher.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    common: TrainOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ProbeKind {
    Knn,
    Linear,
    Seg,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VoteRule {
    Uniform,
    Temperature,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(value_enum)]
    kind: ProbeKind,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset (`labels.jsonl`); falls back to `eval.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    vote: Option<VoteRule>,
    #[arg(long, default_value_t = 0.07)]
    temperature: f64,
    /// Few-shot fractions of the train split, comma-separated.
    #[arg(long, value_delimiter = ',')]
    fraction: Option<Vec<f64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `teacher` (default) or `student`.
    #[arg(long)]
    group: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory searched recursively for probe report JSON files.
    #[arg(long)]
    input: PathBuf,
    /// Where tables are written; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<xstars::Error>() {
            return match e {
                xstars::Error::Config(_) | xstars::Error::Usage(_) | xstars::Error::Parameter(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Scenes(a) => commands::scenes(&a.out, a.n, a.side, a.seed),
        Command::Synth(a) => commands::synth(&a),
        Command::Dataset(a) => commands::dataset(&a),
        Command::Pretrain(a) => commands::pretrain(&a.common, a.resume.as_deref()),
        Command::Continual(a) => commands::continual(&a.common, &a.teacher),
        Command::Probe(a) => probe::run(&a),
        Command::Report(a) => report::run(&a.input, a.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
