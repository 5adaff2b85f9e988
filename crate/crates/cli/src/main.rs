// `!(x > y)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;
mod stages;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use config::RunConfig;
use stages::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Ingest,
    Split,
    Segment,
    Annotate,
    ShuffleBaseline,
    Train,
    Evaluate,
    Report,
    /// Every stage above, in order.
    All,
}

const PIPELINE: [Stage; 8] = [
    Stage::Ingest,
    Stage::Split,
    Stage::Segment,
    Stage::Annotate,
    Stage::ShuffleBaseline,
    Stage::Train,
    Stage::Evaluate,
    Stage::Report,
];

/// Corpus-to-report pipeline for information-elicitation dialogues.
///
/// Each stage reads its inputs from, and writes its outputs to,
/// `<out>/<stage>/`, together with a snapshot of the effective config.
#[derive(Debug, Parser)]
#[command(name = "elicit", version)]
struct Args {
    /// Run config (TOML). Defaults apply to every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    stage: Stage,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `providers.profile` from the config.
    #[arg(long)]
    providers: Option<String>,
    /// Run directory. Defaults to `paths.output_dir`, then to a new
    /// timestamped directory under `runs/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cache directory for provider artifacts such as pretrained base
    /// models.
    #[arg(long, env = "ELICIT_PROVIDER_CACHE", hide = true)]
    provider_cache: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingArtifact { stage: &'static str, path: PathBuf },
    Runtime(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingArtifact { stage, path } => write!(
                f,
                "missing artifact {} (run stage `{stage}` first)",
                path.display()
            ),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<elicit_core::Error> for CliError {
    fn from(e: elicit_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn run(args: Args) -> Result<PathBuf, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    } else {
        let seed = cfg.seed;
        cfg.apply_seed(seed);
    }
    if let Some(p) = args.providers {
        cfg.providers.profile = p;
    }
    if let Some(c) = args.provider_cache {
        cfg.providers.cache_dir = Some(c);
    }
    cfg.validate()?;
    let out = args
        .out
        .or_else(|| cfg.paths.output_dir.clone())
        .unwrap_or_else(|| {
            PathBuf::from("runs").join(format!("run-{}", chrono::Local::now().format("%Y%m%dT%H%M%S")))
        });
    let ctx = Ctx {
        cfg: &cfg,
        out: &out,
        cache_dir: cfg.providers.cache_dir.as_deref(),
    };
    let stages: &[Stage] = match args.stage {
        Stage::All => &PIPELINE,
        ref s => std::slice::from_ref(s),
    };
    for stage in stages {
        match stage {
            Stage::Ingest => stages::ingest(&ctx)?,
            Stage::Split => stages::split(&ctx)?,
            Stage::Segment => stages::segment(&ctx)?,
            Stage::Annotate => stages::annotate(&ctx)?,
            Stage::ShuffleBaseline => stages::shuffle_baseline(&ctx)?,
            Stage::Train => stages::train_stage(&ctx)?,
            Stage::Evaluate => stages::evaluate(&ctx)?,
            Stage::Report => stages::report_stage(&ctx)?,
            Stage::All => unreachable!(),
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
