use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pgd_core::expcli::{self, DatasetSource, ExperimentConfig, ExperimentKind, Overrides};
use pgd_core::linmodel::Loss;
use pgd_core::synthdata::{GeneratorKind, GeneratorParams};

#[derive(Parser)]
#[command(name = "pgd", version, about = "p-norm mirror descent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV plus a JSON description.
    GenData {
        /// r2_anchored, r100_sparse, symmetric_pair or random_separable.
        #[arg(long)]
        kind: Option<GeneratorKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Bregman-distance and norm-growth traces for each p.
    Rates(Common),
    /// Norms of margin-rescaled classifiers across training p.
    BiasTable(Common),
    /// Regularization path against the max-margin direction.
    RegPath(Common),
    /// Weight histograms of small networks across (p, seed).
    ToynetHist(Common),
    /// Randomized check of the one-step mirror descent identity.
    CheckIdentities(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated exponents, e.g. 1.5,2,3.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<u64>,
    /// exp or logistic.
    #[arg(long)]
    loss: Option<Loss>,
    #[arg(long)]
    workers: Option<usize>,
}

fn build(kind: ExperimentKind, common: &Common) -> pgd_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.kind != kind {
                return Err(pgd_core::Error::Config(format!(
                    "{} describes a {:?} experiment, not {kind:?}",
                    path.display(),
                    cfg.kind
                )));
            }
            cfg
        }
        None => ExperimentConfig::defaults(kind),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        p_values: common.p.clone(),
        eta: common.eta,
        iterations: common.iters,
        loss: common.loss,
        workers: common.workers,
    });
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.command {
        Command::GenData { kind, common } => build(ExperimentKind::GenData, common).map(|mut cfg| {
            if let Some(kind) = kind {
                cfg.dataset = Some(DatasetSource::Generator {
                    kind: *kind,
                    params: GeneratorParams::default(),
                });
            }
            cfg
        }),
        Command::Rates(c) => build(ExperimentKind::Rates, c),
        Command::BiasTable(c) => build(ExperimentKind::BiasTable, c),
        Command::RegPath(c) => build(ExperimentKind::RegPath, c),
        Command::ToynetHist(c) => build(ExperimentKind::ToynetHist, c),
        Command::CheckIdentities(c) => build(ExperimentKind::CheckIdentities, c),
    };
    match cfg.and_then(|cfg| expcli::run(&cfg)) {
        Ok(outcome) => {
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            if outcome.passed {
                log::info!("all checks passed");
                ExitCode::SUCCESS
            } else {
                log::warn!("some checks failed; see the summary file");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(1)
        }
    }
}
