mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcsa_core::frontend::FeatureKind;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mcsa", version, about = "Multichannel speaker-attributed ASR toolkit")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Applied on top of the JSON config.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Pipeline config (JSON). Dataset commands fall back to the config
    /// stored with the data.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    /// `mel` or `magphase`.
    #[arg(long, global = true)]
    pub features: Option<FeatureKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate reverberant multi-speaker mixtures with references and profiles.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Number of mixtures.
        #[arg(long)]
        n: Option<usize>,
        /// Microphones per array (2 to 4).
        #[arg(long)]
        mics: Option<usize>,
    },
    /// Compute model input features for every mixture of a dataset.
    Featurize {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model on a featurized dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Greedy SOT decoding of a featurized dataset.
    Decode {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypothesis transcripts against references.
    Score {
        /// Directory of reference transcripts (`<id>.json`).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory of hypothesis transcripts (`<id>.json`).
        #[arg(long)]
        hyp: PathBuf,
        /// Also report results grouped by reference speaker count.
        #[arg(long)]
        per_speaker_count: bool,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the speaker-counting confusion matrix as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Split a meeting's word annotations (JSON lines) into utterance groups.
    Segment {
        #[arg(long)]
        words: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        chunk: Option<f64>,
        #[arg(long)]
        hop: Option<f64>,
    },
    /// Dataset statistics of a group manifest written by `segment`.
    Stats {
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let o = &cli.overrides;
    match cli.command {
        Command::Simulate { out, n, mics } => commands::simulate(o, &out, n, mics),
        Command::Featurize { data } => commands::featurize(o, &data),
        Command::Train { data, out, steps } => commands::train(o, &data, &out, steps),
        Command::Decode { data, model, out } => commands::decode(o, &data, &model, &out),
        Command::Score {
            reference,
            hyp,
            per_speaker_count,
            json,
            csv,
        } => commands::score(o, &reference, &hyp, per_speaker_count, json.as_deref(), csv.as_deref()),
        Command::Segment { words, out, chunk, hop } => commands::segment(o, &words, &out, chunk, hop),
        Command::Stats { groups, json } => commands::stats(&groups, json.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
