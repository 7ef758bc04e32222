mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueHint};

use crate::error::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "wqoe",
    version,
    about = "Continuous QoE prediction for video streaming sessions",
    long_about = "Continuous QoE prediction for video streaming sessions.\n\n\
        Every subcommand accepts --config FILE with `key = value` lines using the long flag \
        names; flags given on the command line take precedence. The resolved configuration is \
        printed to stderr and embedded in every artifact written.\n\n\
        Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic sessions, one CSV per session
    Generate(GenerateArgs),
    /// Derive the model input features of trace CSVs
    Features(FeaturesArgs),
    /// Train a model (or one model per split entry)
    Train(TrainArgs),
    /// Predict per-second QoE for traces, or stream from stdin
    Predict(PredictArgs),
    /// Evaluate trained models over a split protocol
    Eval(EvalArgs),
    /// Time training epochs and single predictions of both models
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Config file of `key = value` lines (flags override it)
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthOpts {
    /// Generator seed
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of sessions
    #[arg(long, default_value_t = 250)]
    sessions: usize,
    /// Session length in seconds
    #[arg(long, default_value_t = 120)]
    duration: usize,
    /// Stall intensity in [0, 1]
    #[arg(long, default_value_t = 0.3)]
    stall: f64,
    /// Distinct content ids
    #[arg(long, default_value_t = 6)]
    contents: usize,
    /// Distinct stall-pattern ids
    #[arg(long, default_value_t = 6)]
    patterns: usize,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct GenerateArgs {
    #[command(flatten)]
    synth: SynthOpts,
    /// Output directory
    #[arg(long, value_name = "DIR", value_hint = ValueHint::DirPath)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct FeaturesArgs {
    /// Trace CSV file or directory of CSVs
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    input: PathBuf,
    /// Output CSV (stdout when omitted)
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct SplitOpts {
    /// Split protocol: holdout, lfovia-loo or live-random80
    #[arg(long, default_value = "holdout")]
    protocol: String,
    /// Test sessions for the holdout protocol (the last ones by id)
    #[arg(long, default_value_t = 50)]
    test_count: usize,
}

#[derive(Args)]
struct TrainOpts {
    /// Window length in seconds
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Windows per mini-batch
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Maximum epochs
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Fraction of training blocks held out for validation
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Seed for initialization, validation split, batch order and split plans
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ArchOpts {
    /// Model type: wavenet or lstm
    #[arg(long, default_value = "wavenet")]
    model_type: String,
    /// WaveNet filter size k
    #[arg(long, default_value_t = 2)]
    filter_size: usize,
    /// WaveNet filters per layer n
    #[arg(long, default_value_t = 32)]
    filters: usize,
    /// WaveNet dilation base d
    #[arg(long, default_value_t = 2)]
    dilation_base: usize,
    /// WaveNet layers L
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// LSTM hidden units
    #[arg(long, default_value_t = 32)]
    hidden: usize,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Trace CSV file or directory of CSVs
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    data: PathBuf,
    /// Model file (holdout) or output directory (per-session protocols)
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    out: PathBuf,
    /// Training log CSV (default: next to the model)
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    log: Option<PathBuf>,
    #[command(flatten)]
    split: SplitOpts,
    #[command(flatten)]
    arch: ArchOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Suppress per-epoch progress
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct PredictArgs {
    /// Model file
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    model: PathBuf,
    /// Trace CSV file or directory (not used with --stream)
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    input: Option<PathBuf>,
    /// Output CSV (stdout when omitted)
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    out: Option<PathBuf>,
    /// Read `stsq,pi` lines from stdin and write `t,qoe_pred,warmup` lines
    #[arg(long)]
    stream: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Trace CSV file or directory of CSVs
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    data: PathBuf,
    /// Model file shared by every entry, or a directory of <session_id>.wqoe files
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    model: PathBuf,
    #[command(flatten)]
    split: SplitOpts,
    /// Seed of the split plan
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Report CSV (stdout when omitted)
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    out: Option<PathBuf>,
    /// Per-second predictions CSV
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct BenchArgs {
    /// Trace CSV file or directory (synthetic sessions when omitted)
    #[arg(long, value_name = "PATH", value_hint = ValueHint::AnyPath)]
    data: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthOpts,
    /// Sessions held out (last by id); the rest are timed
    #[arg(long, default_value_t = 50)]
    test_count: usize,
    /// Window length in seconds
    #[arg(long, default_value_t = 8)]
    window: usize,
    /// Windows per mini-batch
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Timed training epochs per model (>= 5)
    #[arg(long, default_value_t = 5)]
    bench_epochs: usize,
    /// Timed single-window predictions per model (>= 1000)
    #[arg(long, default_value_t = 2000)]
    predictions: usize,
    /// Report CSV (stdout when omitted)
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    out: Option<PathBuf>,
    /// Markdown table
    #[arg(long, value_name = "FILE", value_hint = ValueHint::FilePath)]
    markdown: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn run() -> Result<(), CliError> {
    let root = Cli::command();
    let argv = config::expand_argv(&root, std::env::args_os().collect())?;
    let matches = match root.clone().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(()),
                _ => Err(CliError::usage("")),
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::usage(e.to_string()))?;
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = root.find_subcommand(name).expect("parsed subcommand exists");
    let resolved = config::resolve(sub, sub_matches);
    eprintln!("# wqoe {name}");
    for line in config::render(&resolved, true) {
        eprintln!("#   {line}");
    }
    let mut embed = vec![format!("wqoe {name} {}", env!("CARGO_PKG_VERSION"))];
    embed.extend(config::render(&resolved, false));

    match cli.command {
        Command::Generate(a) => commands::generate(a, &embed),
        Command::Features(a) => commands::features(a, &embed),
        Command::Train(a) => commands::train(a, &embed),
        Command::Predict(a) => commands::predict(a, &embed),
        Command::Eval(a) => commands::eval(a, &embed),
        Command::Bench(a) => commands::bench(a, &embed),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {e}");
            }
            ExitCode::from(if e.code == 0 { EXIT_USAGE } else { e.code })
        }
    }
}
