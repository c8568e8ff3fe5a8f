//! flilab: simulate gated fluorescence-decay datasets, train the
//! transformer estimator, run classical fits, and compare everything in
//! one report.

mod commands;
mod config;

use clap::{Parser, Subcommand, ValueEnum};
use fli_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "flilab", version, about = "Fluorescence-lifetime estimation laboratory")]
struct Cli {
    /// Master seed; every stochastic quantity derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = all cores). Falls back to FLILAB_THREADS.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// JSON run configuration; missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttentionArg {
    Diff,
    Standard,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMode {
    Nlsf,
    Cmm,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (FLD1).
    Simulate {
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the estimator on a dataset with ground truth.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Where the best-validation weights go (FLW1).
        #[arg(long)]
        model_out: PathBuf,
        /// Attention mechanism; overrides the config.
        #[arg(long)]
        attention: Option<AttentionArg>,
        /// Replace every pixel's IRF with the zero-delay reference.
        #[arg(long)]
        ablate_irf: bool,
        /// Training log CSV (default: <model-out>.log.csv).
        #[arg(long)]
        log_out: Option<PathBuf>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Resume from a checkpoint prefix (e.g. dir/ckpt_epoch3).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run inference over a dataset and write per-pixel estimates.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Weights file (FLW1).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace every pixel's IRF with the zero-delay reference.
        #[arg(long)]
        ablate_irf: bool,
    },
    /// Classical per-pixel estimation (nonlinear fit or centroid shift).
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: FitMode,
        /// Fit a free arrival offset (nlsf mode only).
        #[arg(long, default_value = "on")]
        offset_correction: OnOff,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join predictions and fits against ground truth into a report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Prediction CSVs as method=path (mflinet, transformer_std).
        #[arg(long = "pred")]
        preds: Vec<String>,
        /// Fit CSVs as method=path (nlsf_offset, nlsf_no_offset, cmm).
        #[arg(long = "fits")]
        fits: Vec<String>,
        /// Report directory (CSV plus one SVG per region).
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference verification of every gradient rule.
    Gradcheck {
        /// Random instances per check.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Contract(_)
        | Error::Dimension(_)
        | Error::State(_)
        | Error::UndefinedInput(_)
        | Error::Format { .. } => 2,
        Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn init_threads(flag: usize) {
    let n = if flag > 0 {
        flag
    } else {
        std::env::var("FLILAB_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    let result = (|| {
        let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
        cfg.apply_seed(cli.seed);
        match &cli.command {
            Command::Simulate { out } => commands::simulate(&cfg, cli.seed, out),
            Command::Train {
                data,
                model_out,
                attention,
                ablate_irf,
                log_out,
                checkpoint_dir,
                resume,
            } => {
                if let Some(kind) = attention {
                    cfg.model.attention = match kind {
                        AttentionArg::Diff => fli_core::model::AttentionKind::Differential,
                        AttentionArg::Standard => fli_core::model::AttentionKind::Standard,
                    };
                }
                commands::train(
                    &cfg,
                    cli.seed,
                    data,
                    model_out,
                    *ablate_irf,
                    log_out.as_deref(),
                    checkpoint_dir.as_deref(),
                    resume.as_deref(),
                )
            }
            Command::Predict {
                data,
                model,
                out,
                ablate_irf,
            } => commands::predict(&cfg, cli.seed, data, model, out, *ablate_irf),
            Command::Fit {
                data,
                mode,
                offset_correction,
                out,
            } => commands::fit(
                &cfg,
                cli.seed,
                data,
                matches!(mode, FitMode::Cmm),
                matches!(offset_correction, OnOff::On),
                out,
            ),
            Command::Eval {
                data,
                preds,
                fits,
                report,
            } => commands::eval(&cfg, cli.seed, data, preds, fits, report),
            Command::Gradcheck { seeds } => commands::gradcheck(*seeds),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}
