mod commands;
mod datasets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes. Usage errors (unknown flag, bad value) exit with 2 via clap.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_MISSING_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "capsroute", version, about = "Capsule networks with dynamic routing: training, evaluation and analysis")]
struct Cli {
    /// Data root holding mnist/ and cifar10/
    #[arg(long, global = true, env = "CAPSROUTE_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,

    /// Parent directory of run directories
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, train_log.csv and the effective config
    Train(TrainArgs),
    /// Evaluate one or more checkpoints, averaging over them
    Eval(EvalArgs),
    /// Export analysis data as CSV
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Write a MultiMNIST split as IDX files
    SynthMultimnist(SynthArgs),
    /// Finite-difference check of every differentiable primitive
    Gradcheck(GradcheckArgs),
}

/// Config file plus overrides. Each flag sets the config key of the same
/// name (dashes become underscores).
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["squash", "ci", "pa"])]
    activation: Option<String>,
    #[arg(long)]
    pa_n: Option<u32>,
    #[arg(long)]
    ci_bar: Option<f64>,
    #[arg(long, value_parser = ["2", "8", "64"])]
    prim_channels: Option<String>,
    #[arg(long)]
    routing_iters: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout_keep: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Any other config key, as KEY=VALUE; repeatable, applied last
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Skip the held-out evaluation during and after training
    #[arg(long)]
    no_eval: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Averaging {
    Metric,
    Weights,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint files; repeat to average
    #[arg(long, required_unless_present = "run")]
    checkpoint: Vec<PathBuf>,
    /// Evaluate the last checkpoints of this run directory
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// How many of the run's latest checkpoints to use (default: eval_checkpoints from its config)
    #[arg(long, requires = "run")]
    last: Option<usize>,
    /// `<mnist|cifar10|multimnist>-<train|test>`; default: the config's test split
    #[arg(long)]
    dataset: Option<String>,
    /// Evaluate only the first N images (0 = all)
    #[arg(long, default_value_t = 0)]
    subset: usize,
    /// Default: checkpoint_averaging from the config
    #[arg(long, value_enum)]
    averaging: Option<Averaging>,
}

#[derive(Args)]
struct AnalyzeSource {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `<mnist|cifar10|multimnist>-<train|test>`; default: the config's test split
    #[arg(long)]
    dataset: Option<String>,
    /// Use only the first N images (0 = all)
    #[arg(long, default_value_t = 0)]
    subset: usize,
    /// Output CSV; default: <runs-dir>/<hash>-<timestamp>/<kind>.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Mean primary activations sorted in descending order
    Curve {
        #[command(flatten)]
        source: AnalyzeSource,
        /// Keep the largest N positions (0 = all)
        #[arg(long, default_value_t = capsroute_core::analysis::DEFAULT_CURVE_TOP)]
        top: usize,
    },
    /// Per-capsule max routing coefficient and its ordered curve
    Coeff {
        #[command(flatten)]
        source: AnalyzeSource,
        #[arg(long, default_value_t = capsroute_core::analysis::DEFAULT_COEFF_TOP)]
        top: usize,
        #[arg(long, default_value_t = capsroute_core::analysis::DEFAULT_COEFF_THRESHOLD)]
        threshold: f64,
    },
    /// Per-capsule influence against activation norm
    Influence {
        #[command(flatten)]
        source: AnalyzeSource,
    },
    /// Primary activation map of one image
    Actmap {
        #[command(flatten)]
        source: AnalyzeSource,
        /// Image index within the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = Aggregation::Max)]
        agg: Aggregation,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    Max,
    Mean,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = ["train", "test"], default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 20)]
    per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use a stratified subset of N source digits (0 = all)
    #[arg(long, default_value_t = 0)]
    subset: usize,
    /// Output directory; default: a fresh run directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = capsroute_core::gradcheck::DEFAULT_CASES)]
    cases: usize,
    /// Also write the results as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use capsroute_core::Error;
    for cause in err.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::MissingData(_)) => return EXIT_MISSING_DATA,
            Some(Error::Divergence { .. }) => return EXIT_DIVERGED,
            _ => {}
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
