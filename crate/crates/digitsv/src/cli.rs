//! Argument parsing and dispatch. Results go to stdout; progress and errors
//! to stderr. Runtime failures exit 1, usage errors exit 2.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use digitsv_core::corpus::Split;
use digitsv_core::fusion::Strategy;
use digitsv_core::speaker::EpochLog;

use crate::config::load_config;
use crate::pipeline;
use crate::CoreExt;

#[derive(Debug, Parser)]
#[command(
    name = "digitsv",
    version,
    about = "Text-dependent speaker verification on synthetic digit strings"
)]
pub struct Cli {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the corpus: wav files plus manifest.csv.
    GenCorpus {
        /// Experiment directory to create.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compute MFCC features for every manifest row.
    ExtractFeatures {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
    /// Train the speaker encoder and checkpoint it.
    TrainSpeaker {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the text encoder and checkpoint it.
    TrainText {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Embed a split with both encoders.
    Embed {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sample the balanced joint-protocol trial list for a split.
    MakeTrials {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a split's trials with an embedding back-end.
    Score {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        /// speaker-only | add | mul | cnn (config default when omitted).
        #[arg(long)]
        strategy: Option<String>,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// EER and minDCF for a score file; `--out` also writes report.json and
    /// the DET sweep CSV.
    Eval {
        #[arg(long, value_name = "FILE")]
        scores: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train the CNN fusion head on train-split embeddings and trials.
    FuseTrain {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
    /// Speaker-only EER per (window, stride) pooling cell on the test split.
    SweepPooling {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
}

fn print_epoch_logs(logs: &[EpochLog]) {
    for l in logs {
        println!("epoch {:>3}  lr {:.6}  loss {:.4}", l.epoch, l.lr, l.loss);
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { out } => {
            let rows = pipeline::gen_corpus(&cfg, &out)?;
            println!("wrote {} utterances under {}", rows.len(), out.display());
        }
        Command::ExtractFeatures { dir } => {
            let n = pipeline::extract_features(&cfg, &dir)?;
            println!("extracted features for {n} utterances");
        }
        Command::TrainSpeaker { dir, resume } => {
            let logs = pipeline::train_speaker(&cfg, &dir, resume)?;
            print_epoch_logs(&logs);
        }
        Command::TrainText { dir, resume } => {
            let logs = pipeline::train_text(&cfg, &dir, resume)?;
            let mut per_epoch: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
            for l in &logs {
                let e = per_epoch.entry(l.epoch).or_insert((0.0, 0));
                e.0 += l.total;
                e.1 += 1;
            }
            for (epoch, (sum, n)) in per_epoch {
                println!("epoch {epoch:>3}  mean total {:.4}", sum / n as f64);
            }
        }
        Command::Embed { dir, split } => {
            let split = Split::parse(&split).core_err()?;
            let records = pipeline::embed(&cfg, &dir, split)?;
            println!("embedded {} {} utterances", records.len(), split.as_str());
        }
        Command::MakeTrials { dir, split } => {
            let split = Split::parse(&split).core_err()?;
            let trials = pipeline::make_trials(&cfg, &dir, split)?;
            println!("wrote {} {} trials", trials.len(), split.as_str());
        }
        Command::Score { dir, strategy, split } => {
            let split = Split::parse(&split).core_err()?;
            let strategy = match strategy {
                Some(s) => Strategy::parse(&s).core_err()?,
                None => cfg.strategy()?,
            };
            let set = pipeline::score(&cfg, &dir, strategy, split)?;
            println!("scored {} trials with {}", set.len(), strategy.as_str());
        }
        Command::Eval { scores, out } => {
            let report = pipeline::evaluate(&cfg, &scores, out.as_deref())?;
            println!("eer={:.4}", report.eer);
            println!("min_dcf={:.4}", report.min_dcf);
            println!("threshold={:.4}", report.threshold);
        }
        Command::FuseTrain { dir } => {
            let logs = pipeline::fuse_train(&cfg, &dir)?;
            print_epoch_logs(&logs);
        }
        Command::SweepPooling { dir } => {
            let rows = pipeline::sweep_pooling(&cfg, &dir)?;
            for r in &rows {
                println!(
                    "window={} stride={} eer={:.4} min_dcf={:.4}",
                    r.window, r.stride, r.eer, r.min_dcf
                );
            }
        }
    }
    Ok(())
}
