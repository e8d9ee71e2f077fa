//! Batch front-end: data generation, training, evaluation, benchmarks and
//! inference, each writing into its own run directory.

pub mod commands;
pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nowcast_core::Error;

pub use config::RunConfig;
pub use run::RunDir;

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "Radar nowcasting: simulate, train, evaluate, benchmark, infer")]
#[command(after_help = config::keys_help())]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides train.workers; also bounds inference threads.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate mosaics and write train/test patch datasets.
    GenData,
    /// Train on a gen-data directory.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Continue from a checkpoint file.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Lead-time MSE on the test set; persistence only without weights.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// Wall time against worker count (eval.bench_workers).
    BenchScaling {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Wall time and validation loss against batch size (eval.bench_batches).
    BenchBatch {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Forecast six frames over a full mosaic.
    Infer {
        #[arg(long, value_name = "PATH")]
        mosaics: PathBuf,
        #[arg(long, value_name = "PATH")]
        weights: PathBuf,
        /// gen-data directory holding the normalization stats.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Match each forecast frame's local histograms to a reference frame.
    MatchHist {
        #[arg(long, value_name = "PATH")]
        forecast: PathBuf,
        /// Its last frame is used.
        #[arg(long, value_name = "PATH")]
        reference: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::BenchScaling { .. } => "bench-scaling",
            Command::BenchBatch { .. } => "bench-batch",
            Command::Infer { .. } => "infer",
            Command::MatchHist { .. } => "match-hist",
        }
    }
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::ConfigHashMismatch { .. } => EXIT_CONFIG,
                Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
                Error::Shape { .. } | Error::OddCrop { .. } | Error::NegativeExtent { .. } | Error::Graph(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    1
}

/// Config file, then flags.
pub fn resolve_config(args: &CommonArgs) -> nowcast_core::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(workers) = args.workers {
        cfg.train.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run one command; returns its run directory.
pub fn execute(cli: &Cli) -> anyhow::Result<PathBuf> {
    let cfg = resolve_config(&cli.common)?;
    let name = cli.command.name();
    let run = RunDir::create(&cfg.out, name).map_err(Error::from)?;
    log::info!("{name}: writing to {}", run.path().display());
    let result = match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &run),
        Command::Train { data, resume } => commands::train(&cfg, &run, data, resume.as_deref()),
        Command::Eval { data, weights } => commands::eval(&cfg, &run, data, weights.as_deref()),
        Command::BenchScaling { data } => commands::bench_scaling(&cfg, &run, data),
        Command::BenchBatch { data } => commands::bench_batch(&cfg, &run, data),
        Command::Infer { mosaics, weights, data } => commands::infer(&cfg, &run, mosaics, weights, data),
        Command::MatchHist { forecast, reference } => commands::match_hist(&cfg, &run, forecast, reference),
    };
    let inputs = match result {
        Ok(inputs) => inputs,
        Err(e) => {
            run.mark_failed(&format!("{e:#}"));
            return Err(e);
        }
    };
    let mut all = cli.common.config.iter().cloned().collect::<Vec<_>>();
    all.extend(inputs);
    run.write_manifest(name, &cfg, &all)?;
    Ok(run.path().to_path_buf())
}
