//! `lexdebias`: audit, rebalance, train, evaluate and explain sentence-pair
//! classifiers with respect to lexical dataset biases.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lexdebias::augmentation::AugmentSource;
use lexdebias::bias_audit::BiasKind;
use lexdebias::corpus::Label;
use lexdebias::debias_grl::DebiasVariant;
use lexdebias::model::ModelKind;
use lexdebias::synth::SynthWorld;
use lexdebias::ErrorClass;

#[derive(Parser, Debug)]
#[command(
    name = "lexdebias",
    version,
    about = "Lexical bias auditing and debiasing for sentence-pair classifiers"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base directory for relative input paths.
    #[arg(long, global = true, env = "LEXDEBIAS_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-word label statistics of hypothesis words and selected contradiction words.
    Audit(AuditArgs),
    /// Extract a balanced evaluation set (plus manifest).
    ExtractBal(ExtractArgs),
    /// Add counter-bias training data by repetition or synthesis.
    Augment(AugmentArgs),
    /// Build a stress evaluation set by appending tautologies.
    Stress(StressArgs),
    /// Train a baseline, GRL or HEX model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Explain one prediction with a local linear surrogate.
    Explain(ExplainArgs),
    /// Generate a planted-bias synthetic benchmark.
    SynthBench(SynthArgs),
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub bias: BiasKind,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Defaults to the matched dev set of the configuration.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<usize>,
    /// Comma-separated contradiction words (CWB).
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub mode: AugmentSource,
    #[arg(long)]
    pub bias: BiasKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StressArgs {
    #[arg(long)]
    pub bias: BiasKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub variant: Option<DebiasVariant>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Model-selection set; defaults to the mismatched dev set.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    /// Checkpoint to initialize from (same vocabulary).
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step metrics (JSON lines).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `PATH` or `PATH@RULE`, where RULE is bal-cwb, bal-wob, stress-cwb or stress-wob.
    #[arg(long = "datasets", num_args = 1..)]
    pub datasets: Vec<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset containing the example.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub example_id: String,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub target: Option<Label>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub world: Option<SynthWorld>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_dev: Option<usize>,
    /// Per-class size of the balanced sets.
    #[arg(long, default_value_t = 150)]
    pub bal_target: usize,
}

pub enum Failure {
    Usage(String),
    Lib(lexdebias::Error),
}

impl From<lexdebias::Error> for Failure {
    fn from(e: lexdebias::Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `lexdebias --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            let code = match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Training => 3,
            };
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
