//! Command-line front end: synthesize data, train, evaluate, spot and probe.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transpotter::model::Variant;

#[derive(Parser, Debug)]
#[command(
    name = "transpotter",
    version,
    about = "Visual keyword spotting with a joint video-phoneme transformer",
    after_help = "Any config field can be overridden with a dot-path flag, e.g. `--train.epochs 20`."
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; unset fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data synthesis, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing output.
    #[arg(long, global = true)]
    force: bool,
    /// Continue an interrupted training run.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Train a model on a dataset directory.
    Train {
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Presence-loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Dataset directory (defaults to `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score every test keyword against every test clip.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the test manifest under `paths.data`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `lexicon.dict` beside the manifest.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        min_phonemes: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        /// Words per query; 2 evaluates bigram phrases.
        #[arg(long, default_value_t = 1)]
        ngram: usize,
    },
    /// Locate a keyword or phrase in one feature file.
    Spot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Also write the per-frame curve as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// One word, or several for a phrase.
        #[arg(required = true)]
        keyword: Vec<String>,
    },
    /// Plot several queries' frame curves on one clip.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        clip: String,
        /// Queries; quote multi-word phrases.
        #[arg(required = true)]
        queries: Vec<String>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: transpotter::Error| e.to_string())
}

fn report(err: &anyhow::Error) {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<transpotter::Error>())
        .map(transpotter::Error::kind)
        .or_else(|| {
            err.chain()
                .find_map(|e| e.downcast_ref::<std::io::Error>())
                .map(|_| "io")
        })
        .unwrap_or("usage");
    eprintln!("error[{kind}]: {err:#}");
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match config::extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            report(&e);
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match commands::run(cli.command, &cli.common, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
