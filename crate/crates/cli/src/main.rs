//! `made`: data generation, training, evaluation and analysis for
//! description-augmented person re-identification.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the directory that timestamped run
/// directories are created under.
pub const OUTPUT_ROOT_ENV: &str = "MADE_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "made", version, about = "Description-augmented cloth-changing re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic cloth-changing dataset.
    GenData(GenDataArgs),
    /// Show what masking and noise do to one sample's attribute vector.
    MaskDebug(MaskDebugArgs),
    /// Train a model on the training split of a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval(EvalArgs),
    /// Retention statistics and ablation reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train and evaluate one run per grid point, then merge the results.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to a timestamped directory under the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskDebugArgs {
    /// Attribute file of `sample_id<TAB>bitstring` lines.
    #[arg(long, requires = "sample", conflicts_with = "bits")]
    attrs: Option<PathBuf>,
    /// Sample to look up in the attribute file.
    #[arg(long)]
    sample: Option<String>,
    /// A bitstring given directly instead of a file lookup.
    #[arg(long, required_unless_present = "attrs")]
    bits: Option<String>,
    /// Vocabulary file; defaults to the bundled vocabulary.
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_ratio: f64,
    #[arg(long, default_value = "replace")]
    noise_model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest written by `gen-data`.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SettingArg {
    General,
    Cc,
    Sc,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    setting: SettingArg,
    /// Metrics CSV to write; defaults to `metrics.csv` in a new run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run label stored in the CSV; defaults to the checkpoint's directory name.
    #[arg(long)]
    run: Option<String>,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Per-category retention of cloth-irrelevant attributes across images.
    Retention(RetentionArgs),
    /// Merge metrics CSVs into an ablation table and plots.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
struct RetentionArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Attribute file to analyse instead of the manifest's attributes.
    #[arg(long)]
    attrs: Option<PathBuf>,
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    /// train, query, gallery or all.
    #[arg(long, default_value = "train")]
    split: String,
    /// Retention rule (strict or pairwise).
    #[arg(long, default_value = "strict")]
    rule: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Metrics CSVs produced by `eval`.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    /// Noise ratios 0, 0.05, 0.10, 0.15, 0.20 at full masking.
    Noise,
    /// Mask ratios 0.3, 0.6, 0.9, 1.0.
    Mask,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Existing manifest; when absent a dataset is generated from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
