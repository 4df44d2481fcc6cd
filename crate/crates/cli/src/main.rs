//! `loadcast` command-line tool.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loadcast::pipeline::ModelKind;
use loadcast::Error;

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "loadcast", version, about = "Probabilistic day-ahead load forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel (`panel.csv`, `synth_truth.json`).
    Synth(Common),
    /// Fit entity embeddings.
    Embed(Common),
    /// Train a model and write its checkpoint, normalization and log.
    Train(Common),
    /// Write mixtures, ensembles, fans, bands, best traces and sigma fans
    /// for the test span.
    Forecast(Common),
    /// Score a trained model on the test span.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Score a fan CSV written by `forecast` instead of computing fans.
        #[arg(long)]
        fans: Option<PathBuf>,
    },
    /// Run the K x V ablation grid plus the quantile baselines.
    Ablate(Common),
    /// Render SVG fan charts from forecast artifacts.
    Plot(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    GuideVae,
    Qrnn,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated entity ids.
    #[arg(long, value_delimiter = ',')]
    entities: Option<Vec<String>>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    is_samples: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(Error::Config("--workers must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let o = Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            entities: self.entities.clone(),
            model: self.model.map(|m| match m {
                ModelArg::GuideVae => ModelKind::GuideVae,
                ModelArg::Qrnn => ModelKind::Qrnn,
            }),
            samples: self.samples,
            is_samples: self.is_samples,
        };
        RunConfig::load(self.config.as_deref(), &o)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Data(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Factorization(_) => 3,
        Error::MissingArtifact(_) | Error::UnknownEntity(_) => 4,
        Error::State(_) | Error::Io(_) => 1,
    }
}

const PARTIAL_ABLATION: u8 = 5;

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Synth(c) => commands::synth(&c.load()?)?,
        Command::Embed(c) => commands::embed(&c.load()?)?,
        Command::Train(c) => commands::train(&c.load()?)?,
        Command::Forecast(c) => commands::forecast(&c.load()?)?,
        Command::Evaluate { common, fans } => commands::evaluate(&common.load()?, fans.as_deref())?,
        Command::Ablate(c) => {
            if !commands::ablate(&c.load()?)? {
                return Ok(PARTIAL_ABLATION);
            }
        }
        Command::Plot(c) => {
            let cfg = c.load()?;
            for p in plot::plot(&cfg.out_dir, cfg.entities.as_deref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
