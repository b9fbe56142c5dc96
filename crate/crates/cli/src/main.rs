//! `knnproxy`: datastore building, aligned scoring and detection, routing,
//! attribution, synthetic benchmarks, bound validation and ablation sweeps.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use knnproxy_core::detect::DetectorKind;
use knnproxy_core::{Error, ErrorKind, Result};
use tracing::{error, info};

use config::{ProviderKind, RunConfig, SweepAxis, CONFIG_REFERENCE, SEED_ENV};

#[derive(Parser)]
#[command(name = "knnproxy", version, about, after_long_help = CONFIG_REFERENCE)]
#[command(after_help = "Run with --help for every configuration key.\n\
Exit codes: 0 success, 2 configuration error, 3 data or format error, 4 degenerate score.")]
struct Cli {
    /// TOML (or .json) configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file and KNNPROXY_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key, e.g. --set retrieval.k=128.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// error | warn | info | debug | trace
    #[arg(long, global = true, default_value = "info")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArgs {
    /// JSON-lines corpus; optional for the file provider.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    /// Datastore file (datastore.path).
    #[arg(long)]
    datastore: Option<PathBuf>,
    /// Score with the proxy alone.
    #[arg(long)]
    no_align: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus with the proxy and store (key, next token) pairs.
    BuildDatastore {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// All detector scores and retrieval diagnostics per text.
    Score {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// The configured detector's score and decision per text.
    Detect {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long, value_enum)]
        detector: Option<DetectorArg>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Labeled corpus used to pick the best-F1 threshold.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// AUROC and F1 against corpus labels, as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// ROC points against corpus labels, as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Route each text to one expert datastore, then score it.
    Route {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        sentences: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-set source attribution over the registry's experts.
    Attribute {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Accuracy and confusion matrix against corpus labels, as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Confusion matrix as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Detection AUROC with and without alignment on the synthetic benchmark.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Empirical violation rate of the retrieval error bound.
    ValidateBound {
        /// Independent seeded replications, seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        replications: usize,
        /// Failure probabilities to evaluate; default bound.delta.
        #[arg(long, value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Vary one setting on the synthetic benchmark and tabulate AUROC.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProviderArg {
    Toy,
    File,
    Http,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DetectorArg {
    Likelihood,
    FastDetect,
    Binoculars,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw.trim().parse().map_err(|_| {
            Error::Config(format!(
                "{SEED_ENV} must be an unsigned integer, got {raw:?}"
            ))
        })?;
    }
    for s in &cli.sets {
        cfg.set(s)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    match &cli.command {
        Command::BuildDatastore {
            provider,
            window,
            stride,
            max_entries,
            ..
        } => {
            if let Some(p) = provider {
                cfg.provider.kind = match p {
                    ProviderArg::Toy => ProviderKind::Toy,
                    ProviderArg::File => ProviderKind::File,
                    ProviderArg::Http => ProviderKind::Http,
                };
            }
            cfg.datastore.window = window.unwrap_or(cfg.datastore.window);
            cfg.datastore.stride = stride.unwrap_or(cfg.datastore.stride);
            cfg.datastore.max_entries = max_entries.or(cfg.datastore.max_entries);
        }
        Command::Score { align, .. } => {
            cfg.datastore.path = align.datastore.clone().or(cfg.datastore.path);
        }
        Command::Detect {
            align,
            detector,
            threshold,
            calibration,
            ..
        } => {
            cfg.datastore.path = align.datastore.clone().or(cfg.datastore.path);
            if let Some(d) = detector {
                cfg.detector.kind = match d {
                    DetectorArg::Likelihood => DetectorKind::Likelihood,
                    DetectorArg::FastDetect => DetectorKind::FastDetect,
                    DetectorArg::Binoculars => DetectorKind::Binoculars,
                };
            }
            cfg.detector.threshold = threshold.or(cfg.detector.threshold);
            cfg.detector.calibration = calibration.clone().or(cfg.detector.calibration);
        }
        Command::Route {
            registry,
            sentences,
            ..
        } => {
            cfg.router.registry = registry.clone().or(cfg.router.registry);
            cfg.router.sentences = sentences.clone().or(cfg.router.sentences);
        }
        Command::Attribute { registry, .. } => {
            cfg.router.registry = registry.clone().or(cfg.router.registry);
        }
        Command::Sweep { axis, values, .. } => {
            cfg.sweep.axis = axis.unwrap_or(cfg.sweep.axis);
            if !values.is_empty() {
                cfg.sweep.values = values.clone();
            }
        }
        Command::Bench { .. } | Command::ValidateBound { .. } | Command::ShowConfig => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let resolved = serde_json::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    info!(config = %resolved, "resolved configuration");
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::BuildDatastore { corpus, out, .. } => {
            commands::build(&cfg, corpus.corpus.as_deref(), out)
        }
        Command::Score { corpus, align, out } => {
            commands::score(&cfg, corpus.corpus.as_deref(), out, !align.no_align)
        }
        Command::Detect {
            corpus,
            align,
            out,
            report,
            roc,
            ..
        } => commands::run_detect(
            &cfg,
            corpus.corpus.as_deref(),
            out,
            !align.no_align,
            report.as_deref(),
            roc.as_deref(),
        ),
        Command::Route { corpus, out, .. } => {
            commands::run_route(&cfg, corpus.corpus.as_deref(), out)
        }
        Command::Attribute {
            corpus,
            out,
            report,
            confusion,
            ..
        } => commands::run_attribute(
            &cfg,
            corpus.corpus.as_deref(),
            out,
            report.as_deref(),
            confusion.as_deref(),
        ),
        Command::Bench { out, roc } => commands::bench(&cfg, out, roc.as_deref()),
        Command::ValidateBound {
            replications,
            deltas,
            out,
            csv,
        } => commands::validate_bound(&cfg, *replications, deltas, out, csv.as_deref()),
        Command::Sweep { out, csv, .. } => commands::sweep(&cfg, out, csv.as_deref()),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_max_level(cli.log_level)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Degenerate => 4,
            };
            error!(error = %e, exit_code = code, "run failed");
            ExitCode::from(code)
        }
    }
}
