mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// Local climate zone mapping pipeline.
///
/// Every subcommand reads an optional JSON run configuration; command-line
/// flags override the file, which overrides built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "lcz", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON run configuration; unknown keys are rejected
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Run single-threaded
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output path (file or directory, depending on the subcommand)
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit without running
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene (directory of layers and points) or, with
    /// --n-per-class, a patch dataset
    Synth(commands::SynthArgs),
    /// Compute a single-band NDVI raster
    Ndvi(commands::NdviArgs),
    /// Label points with the rule engine from stacked auxiliary layers
    LabelAssist(commands::LabelAssistArgs),
    /// Cut patches around labeled points into a dataset
    Sample(commands::SampleArgs),
    /// Oversample minority classes with dihedral transforms
    Augment(commands::AugmentArgs),
    /// Tag a dataset with a stratified train/val/test split
    Split(commands::SplitArgs),
    /// Train a random forest on the train split
    TrainRf(commands::TrainRfArgs),
    /// Train a multi-scale CNN on the train split, early-stopping on val
    TrainCnn(commands::TrainCnnArgs),
    /// Train a source-domain backbone for later transfer
    Pretrain(commands::TrainCnnArgs),
    /// Attach fresh dense heads to a backbone and train them
    Transfer(commands::TransferArgs),
    /// Score a model on the test split
    Eval(commands::EvalArgs),
    /// Classify a raster into a class map
    Map(commands::MapArgs),
    /// Finite-difference gradient verification in 64-bit precision
    Gradcheck(commands::GradcheckArgs),
}

/// A failure and its exit code: 2 for usage, 1 for data.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(lcz_core::Error),
    /// A verification that ran but did not pass.
    Check(String),
}

impl From<lcz_core::Error> for Failure {
    fn from(e: lcz_core::Error) -> Self {
        match e {
            lcz_core::Error::InvalidConfig(m) => Failure::Usage(m),
            other => Failure::Data(other),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) | Failure::Check(_) => 1,
        }
    }

    fn line(&self) -> String {
        let (kind, message) = match self {
            Failure::Usage(m) => ("usage", m.clone()),
            Failure::Data(e) => (e.kind(), e.to_string()),
            Failure::Check(m) => ("check_failed", m.clone()),
        };
        serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

fn resolve(global: &GlobalArgs, command: &Command) -> Result<RunConfig, Failure> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.deterministic {
        cfg.deterministic = true;
    }
    if global.threads.is_some() {
        cfg.threads = global.threads;
    }
    commands::apply_overrides(command, &mut cfg)?;
    Ok(cfg.finish()?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.global, &cli.command)?;
    let resolved = serde_json::to_string(&cfg).map_err(lcz_core::Error::from)?;
    if cli.global.print_config {
        println!("{resolved}");
        return Ok(());
    }
    log::info!("resolved config: {resolved}");
    let threads = if cfg.deterministic { 1 } else { cfg.threads.unwrap_or(0) };
    // fails only if a pool already exists, which cannot happen here
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    commands::dispatch(&cli.command, &cfg, cli.global.out.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("{}", Failure::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
