//! `dsq`: generate synthetic lectures, train language models and
//! recognizers, decode and score.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsq_core::decoding::ContextMode;
use dsq_core::training::Smoothing;

/// Bad invocation or configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A check that ran to completion but failed numerically.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(pub String);

#[derive(Parser)]
#[command(name = "dsq", version, about = "Discourse-level speech recognition on synthetic lectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set training.alpha=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (manifests, features, transcripts).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the large-context language model on the transcripts.
    TrainLm {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory with train.tsv and valid.tsv.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the recognizer.
    TrainAsr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        smoothing: Option<SmoothingArg>,
        /// Language model checkpoint supplying distillation targets.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Transcribe every lecture of a manifest.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest file (e.g. corpus/test.tsv).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_enum)]
        context: Option<ContextArg>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Output transcripts (`lecture<TAB>index<TAB>text`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Micro-averaged character error rate of hypotheses against references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Finite-difference check of every block at the configured size.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SmoothingArg {
    None,
    Label,
    Kd,
    KdContextFree,
}

impl From<SmoothingArg> for Smoothing {
    fn from(s: SmoothingArg) -> Self {
        match s {
            SmoothingArg::None => Smoothing::None,
            SmoothingArg::Label => Smoothing::Label,
            SmoothingArg::Kd => Smoothing::Kd,
            SmoothingArg::KdContextFree => Smoothing::KdContextFree,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ContextArg {
    Hypothesis,
    Oracle,
    None,
}

impl From<ContextArg> for ContextMode {
    fn from(c: ContextArg) -> Self {
        match c {
            ContextArg::Hypothesis => ContextMode::Hypothesis,
            ContextArg::Oracle => ContextMode::Oracle,
            ContextArg::None => ContextMode::None,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericFailure>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<dsq_core::Error>() {
            return match e {
                dsq_core::Error::NonFinite(_) | dsq_core::Error::GradCheck(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { cfg, out, force } => commands::gen_data(&cfg, &out, force),
        Command::TrainLm { cfg, corpus, out, force } => commands::train_lm(&cfg, &corpus, &out, force),
        Command::TrainAsr {
            cfg,
            corpus,
            smoothing,
            teacher,
            out,
            force,
        } => commands::train_asr(&cfg, &corpus, smoothing.map(Into::into), teacher.as_deref(), &out, force),
        Command::Decode {
            cfg,
            ckpt,
            corpus,
            beam,
            context,
            max_len,
            out,
        } => commands::decode(&cfg, &ckpt, &corpus, beam, context.map(Into::into), max_len, &out),
        Command::Eval { hyp, reference } => commands::eval(&hyp, &reference),
        Command::Gradcheck { cfg, samples, tol } => commands::gradcheck(&cfg, samples, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
