//! `mtlavsr`: one binary wiring all pipeline stages.
//!
//! Subcommands follow the pipeline order: `synth` makes the corpus,
//! `train-gmm` bootstraps the two modality models, `align` produces the
//! frame-label streams, `train-dnn` trains the network(s), `decode`
//! writes hypotheses over the noise x modality grid, `score` computes
//! the results table, and `experiment` chains everything plus the trend
//! report (optionally over several seeds).
//!
//! Exit codes: 0 success, 1 stage failure, 2 configuration error.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use mtlavsr_core::evalharness::ModelSpec;
use stages::StageCtx;

#[derive(Parser)]
#[command(name = "mtlavsr", version, about = "Audio-visual speech recognition workbench")]
struct Cli {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the corpus/training master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap worker threads (requires the default `parallel` build).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Rerun stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus: media files, manifest, and split.
    Synth,
    /// Bootstrap the acoustic and visual GMM/HMM models.
    TrainGmm,
    /// Force-align both modalities and compute state priors.
    Align,
    /// Train network(s): all configured models by default.
    TrainDnn {
        /// Train only the single-task baseline (auxiliary weight 0).
        #[arg(long, conflicts_with = "lambda")]
        stl: bool,
        /// Train only the model with this auxiliary weight.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Decode the test set over the full condition grid.
    Decode {
        /// Decode only this model (default: all configured models).
        #[arg(long)]
        model: Option<String>,
    },
    /// Score hypotheses into the results table.
    Score,
    /// Run the whole pipeline and the trend report.
    Experiment {
        /// Repeat with this many consecutive seeds and emit a mean table.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    #[cfg(feature = "parallel")]
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    #[cfg(not(feature = "parallel"))]
    if cli.jobs.is_some() {
        log::warn!("--jobs has no effect: built without the `parallel` feature");
    }

    let cfg = match RunConfig::load(cli.config.as_deref(), cli.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let ctx = StageCtx::new(cfg, cli.force);

    let result = match cli.command {
        Command::Synth => stages::cmd_synth(&ctx),
        Command::TrainGmm => stages::cmd_train_gmm(&ctx),
        Command::Align => stages::cmd_align(&ctx),
        Command::TrainDnn { stl, lambda } => {
            let models: Vec<ModelSpec> = if stl {
                vec![ModelSpec::stl()]
            } else if let Some(l) = lambda {
                vec![if l == 0.0 { ModelSpec::stl() } else { ModelSpec::mtl(l) }]
            } else {
                ctx.cfg.models()
            };
            stages::cmd_train_dnn(&ctx, &models)
        }
        Command::Decode { model } => stages::cmd_decode(&ctx, model.as_deref()),
        Command::Score => stages::cmd_score(&ctx),
        Command::Experiment { seeds } => stages::cmd_experiment(&ctx, seeds),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
