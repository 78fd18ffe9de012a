//! `fusehead`: synthesize data, train cross-validated seed ensembles,
//! evaluate runs and inspect caches.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for data and
//! format errors, 4 for numeric failures, 1 for anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusehead::data::synth::Profile;
use fusehead::data::{self, Split};
use fusehead::eval::SHIFT_DELTAS;
use fusehead::fusion::{FusionKind, Prep};
use fusehead::ErrorClass;

use commands::GroupBy;
use config::DATA_ENV;

#[derive(Parser)]
#[command(name = "fusehead", version, about = "Fusion heads for intelligibility prediction over cached encoder features")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted label structure.
    Synth(SynthCmd),
    /// Train folds x seeds from a run config.
    Train(TrainCmd),
    /// Report metrics of a run.
    Evaluate(EvaluateCmd),
    /// Average the predictions of two runs with equal weights.
    EnsembleAvg(EnsembleCmd),
    /// Count trainable parameters of a variant.
    Params(ParamsCmd),
    /// Re-evaluate a frame-aligned run under temporal shifts.
    ShiftSweep(ShiftCmd),
    /// Check a feature cache and, optionally, its manifest.
    ValidateCache(ValidateCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Local,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Dev,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Dev => Split::Dev,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ByArg {
    Severity,
    System,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum KindArg {
    CanaryOnly,
    WavlmOnly,
    PoolLate,
    FrameAligned,
    CrossAttn,
    ReverseLinear,
    ReverseTconv,
    ReverseCrossAttn,
}

impl From<KindArg> for FusionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::CanaryOnly => FusionKind::CanaryOnly,
            KindArg::WavlmOnly => FusionKind::WavlmOnly,
            KindArg::PoolLate => FusionKind::PoolLate,
            KindArg::FrameAligned => FusionKind::FrameAligned,
            KindArg::CrossAttn => FusionKind::CrossAttn,
            KindArg::ReverseLinear => FusionKind::ReverseLinear,
            KindArg::ReverseTconv => FusionKind::ReverseTconv,
            KindArg::ReverseCrossAttn => FusionKind::ReverseCrossAttn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrepArg {
    None,
    Avg,
    Conv,
}

impl From<PrepArg> for Prep {
    fn from(p: PrepArg) -> Self {
        match p {
            PrepArg::None => Prep::None,
            PrepArg::Avg => Prep::Avg,
            PrepArg::Conv => Prep::Conv,
        }
    }
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ProfileArg::Local)]
    profile: ProfileArg,
    /// Feature width of both streams.
    #[arg(long, default_value_t = fusehead::model::ENCODER_DIM)]
    dim: usize,
    /// Output directory.
    #[arg(long, env = DATA_ENV)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainCmd {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
    split: SplitArg,
    /// Group reports; defaults to the run config's analysis section.
    #[arg(long, value_enum)]
    by: Vec<ByArg>,
    /// Run to count per-system wins against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    shift_sweep: bool,
    #[arg(long)]
    params: bool,
    /// Print the report as JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EnsembleCmd {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ParamsCmd {
    /// Read the variant from a run config.
    #[arg(long, conflicts_with = "kind")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long, value_enum, default_value_t = PrepArg::None)]
    prep: PrepArg,
    /// Hidden width; defaults to the variant's standard size.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = fusehead::model::ENCODER_DIM)]
    input_dim: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ShiftCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
    split: SplitArg,
    /// Shifts in 80 ms steps.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    deltas: Option<Vec<i64>>,
}

#[derive(Args)]
struct ValidateCmd {
    /// Cache file; defaults to the one in the data directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Manifest to cross-check; defaults to the one in the data directory
    /// when --cache is not given.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, env = DATA_ENV)]
    data: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|e| e.downcast_ref::<fusehead::Error>()).map(fusehead::Error::class);
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Data) => 3,
        Some(ErrorClass::Numeric) => 4,
        Some(ErrorClass::Io) | None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let profile = match c.profile {
                ProfileArg::Local => Profile::Local,
                ProfileArg::Global => Profile::Global,
            };
            let args = commands::SynthArgs { n: c.n, seed: c.seed, profile, dim: c.dim, out: c.out, force: c.force };
            print!("{}", commands::synth(&args)?);
        }
        Command::Train(c) => {
            print!("{}", commands::train(&commands::TrainArgs { config: c.config, jobs: c.jobs, force: c.force })?);
        }
        Command::Evaluate(c) => {
            let by = c
                .by
                .iter()
                .map(|b| match b {
                    ByArg::Severity => GroupBy::Severity,
                    ByArg::System => GroupBy::System,
                })
                .collect();
            let args = commands::EvaluateArgs {
                run: c.run,
                split: c.split.into(),
                by,
                baseline: c.baseline,
                shift_sweep: c.shift_sweep,
                params: c.params,
            };
            let (text, report) = commands::evaluate(&args)?;
            if c.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{text}");
            }
        }
        Command::EnsembleAvg(c) => {
            let (text, _) = commands::ensemble_avg(&commands::EnsembleArgs { a: c.a, b: c.b, out: c.out, force: c.force })?;
            print!("{text}");
        }
        Command::Params(c) => {
            let args = commands::ParamsArgs {
                config: c.config,
                kind: c.kind.map(Into::into),
                prep: c.prep.into(),
                d: c.d,
                input_dim: c.input_dim,
            };
            let (text, b) = commands::params(&args)?;
            if c.json {
                println!("{}", serde_json::to_string_pretty(&b)?);
            } else {
                println!("{text}");
            }
        }
        Command::ShiftSweep(c) => {
            let args = commands::ShiftArgs { run: c.run, split: c.split.into(), deltas: c.deltas.unwrap_or(SHIFT_DELTAS.to_vec()) };
            print!("{}", commands::shift_sweep(&args)?.0);
        }
        Command::ValidateCache(c) => {
            let (cache, manifest) = match (c.cache, c.data) {
                (Some(cache), _) => (cache, c.manifest),
                (None, Some(dir)) => (dir.join(data::CACHE_FILE), Some(c.manifest.unwrap_or(dir.join(data::MANIFEST_FILE)))),
                (None, None) => {
                    return Err(fusehead::Error::Config(format!("pass --cache or --data, or set {DATA_ENV}")).into());
                }
            };
            print!("{}", commands::validate(&commands::ValidateArgs { cache, manifest })?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
