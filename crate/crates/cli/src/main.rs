//! `certprobe`: train, evaluate and analyze linear uncertainty-direction probes.

mod abstain;
mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use certprobe_core::analysis::CurveMetric;
use certprobe_core::probe::ClassWeighting;
use certprobe_core::shard::Split;

use crate::error::{CliError, CliResult};
use crate::output::Format;

#[derive(Debug, Parser)]
#[command(name = "certprobe", version, about = "Linear uncertainty-direction probes over transformer hidden states")]
struct Cli {
    /// Seed for every random choice made by a command.
    #[arg(long, global = true, env = "CERTPROBE_SEED", default_value_t = 42)]
    seed: u64,

    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate shards with a planted uncertainty direction.
    Synth(SynthArgs),
    /// Check every shard named by a manifest, or individual shard files.
    Validate(ValidateArgs),
    /// Fit one probe per (dataset, layer).
    Train(TrainArgs),
    /// Evaluate probes on held-out shards and pick each dataset's best layer.
    Eval(EvalArgs),
    /// Accuracy of every dataset's probe on every dataset's test shard.
    Crosseval(CrossevalArgs),
    /// Cosine similarity between the probes' weight vectors.
    Cosine(CosineArgs),
    /// Per-layer metric averaged over datasets.
    Layers(LayersArgs),
    /// Correlate probe accuracy with zero-shot self-assessment accuracy.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    None,
    Balanced,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    PrecisionIncorrect,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionMode {
    /// Mutually orthogonal planted directions.
    Orthogonal,
    /// One direction shared by every dataset.
    Shared,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON plant spec (one object or an array); overrides the shape flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synth-model")]
    pub model: String,
    #[arg(long, value_delimiter = ',', default_values_t = ["alpha".to_string(), "beta".to_string()])]
    pub datasets: Vec<String>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 2.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub bias: f64,
    /// Signal scale per layer, e.g. `0.2,1.0,0.5`.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub profile: Vec<f64>,
    #[arg(long, value_enum, default_value_t = DirectionMode::Orthogonal)]
    pub directions: DirectionMode,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, required_unless_present = "shard")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub shard: Vec<PathBuf>,
}

/// Dataset and layer selection shared by several commands.
#[derive(Debug, Args, Clone, Default)]
pub struct Filters {
    /// Restrict to these datasets (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub datasets: Vec<String>,
    /// Restrict to these layers (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub filters: Filters,
    /// Also fit a probe per layer on the concatenation of all selected datasets.
    #[arg(long)]
    pub unified: bool,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub l2: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, value_enum, default_value_t = WeightingArg::None)]
    class_weighting: WeightingArg,
}

impl TrainArgs {
    pub fn class_weighting(&self) -> ClassWeighting {
        match self.class_weighting {
            WeightingArg::None => ClassWeighting::None,
            WeightingArg::Balanced => ClassWeighting::Balanced,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub filters: Filters,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json])]
    pub format: Vec<Format>,
}

impl EvalArgs {
    pub fn split(&self) -> Split {
        self.split.into()
    }
}

#[derive(Debug, Args)]
pub struct CrossevalArgs {
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub filters: Filters,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json])]
    pub format: Vec<Format>,
}

impl CrossevalArgs {
    pub fn split(&self) -> Split {
        self.split.into()
    }
}

#[derive(Debug, Args)]
pub struct CosineArgs {
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub filters: Filters,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json])]
    pub format: Vec<Format>,
}

#[derive(Debug, Args)]
pub struct LayersArgs {
    /// `eval_reports.json` written by `eval`.
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Accuracy)]
    metric: MetricArg,
    /// Count the unified probe as one more dataset.
    #[arg(long)]
    pub include_unified: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Format::Csv, Format::Json])]
    pub format: Vec<Format>,
}

impl LayersArgs {
    pub fn metric(&self) -> CurveMetric {
        match self.metric {
            MetricArg::Accuracy => CurveMetric::Accuracy,
            MetricArg::PrecisionIncorrect => CurveMetric::PrecisionIncorrect,
        }
    }
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Probe accuracy per dataset: a JSON object or `best_layers.json`.
    #[arg(long)]
    pub probe_accuracy: PathBuf,
    /// Self-assessment accuracy per dataset as a JSON object.
    #[arg(long, conflicts_with = "abstain_table", required_unless_present = "abstain_table")]
    pub abstain: Option<PathBuf>,
    /// Abstain table of one dataset as `DATASET=PATH` (repeatable).
    #[arg(long, value_parser = abstain::parse_table_arg)]
    pub abstain_table: Vec<(String, PathBuf)>,
    /// Also write the result to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed;
    let summary = match &cli.command {
        Command::Synth(a) => commands::synth(a, seed)?,
        Command::Validate(a) => commands::validate(a)?,
        Command::Train(a) => commands::train(a, seed)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Crosseval(a) => commands::crosseval(a)?,
        Command::Cosine(a) => commands::cosine(a)?,
        Command::Layers(a) => commands::layers(a)?,
        Command::Correlate(a) => commands::correlate(a)?,
    };
    print!("{}", output::to_pretty_json(&summary)?);
    Ok(())
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json_line());
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        let err = CliError::Internal(format!("panic: {info}"));
        eprintln!("{}", err.to_json_line());
    }));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let message = e.render().to_string();
            let message = message.trim_end().trim_start_matches("error: ");
            return fail(&CliError::Usage(message.to_owned()));
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => fail(&e),
        Err(_) => ExitCode::from(3),
    }
}
