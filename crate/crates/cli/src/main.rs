//! `damm`: data generation, training, sampling, evaluation and gradient
//! audits for the divergence-aware multi-modal diffusion model.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use damm_core::config::parse_kv;
use damm_core::TrainConfig;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "damm", version, about = "Divergence-aware multi-modal conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic vessel/nuclei/target corpus.
    GenData(GenDataArgs),
    /// Train from defaults, an optional config file and `--key value` overrides.
    Train(TrainArgs),
    /// Sample targets for given condition tensors.
    Sample(SampleArgs),
    /// Score a checkpoint on a corpus with one or all branches.
    Eval(EvalArgs),
    /// Check reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub corrupt_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Also write PNG previews.
    #[arg(long)]
    pub png: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory written by `gen-data`; optional with `--steps 0`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh network.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Which part of the corpus to train on.
    #[arg(long, value_enum, default_value_t = SplitChoice::Train)]
    pub split: SplitChoice,
    /// Use the feedback-loss sign exactly as printed.
    #[arg(long)]
    pub paper_literal_dfl: bool,
    /// Filled from the generated `--<config key> <value>` options.
    #[arg(skip)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vessel condition, DTNSR1 `[S,S]`, `[1,S,S]` or `[N,1,S,S]` in [0,1].
    #[arg(long)]
    pub vessel: PathBuf,
    /// Nuclei condition with the same shape; not needed for `--mode uni`.
    #[arg(long)]
    pub nuclei: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Dammp)]
    pub mode: Mode,
    /// Reverse steps; defaults to the checkpoint's `sample_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gate threshold; defaults to the checkpoint's `gamma`.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Dammp)]
    pub mode: EvalMode,
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    pub split: SplitChoice,
    /// Keep only consistent (`clean`) or only corrupted samples.
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Samples per reverse-chain batch; does not change results.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Directory for the report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Clean,
    Corrupt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dammp,
    Uni,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Dammp,
    Uni,
    Multi,
    /// All three branches on the same samples and noise.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Every training config key; `paper_literal_dfl` has its own flag.
fn config_keys() -> Vec<String> {
    parse_kv(&TrainConfig::default().to_kv())
        .expect("default config renders as key = value")
        .into_iter()
        .map(|(k, _)| k)
        .filter(|k| k != "paper_literal_dfl")
        .collect()
}

fn with_config_overrides(cmd: Command, keys: &[String]) -> Command {
    keys.iter().fold(cmd, |c, k| {
        let mut a = Arg::new(k.clone())
            .long(k.clone())
            .value_name("VALUE")
            .help(format!("Override config key `{k}`"))
            .help_heading("Config overrides");
        let dashed = k.replace('_', "-");
        if dashed != *k {
            a = a.visible_alias(dashed);
        }
        c.arg(a)
    })
}

fn collect_overrides(m: &ArgMatches, keys: &[String]) -> Vec<(String, String)> {
    keys.iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.clone(), v.clone())))
        .collect()
}

fn main() -> ExitCode {
    let keys = config_keys();
    let cmd = Cli::command().mut_subcommand("train", |c| with_config_overrides(c, &keys));
    let matches = cmd.get_matches();
    let mut cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let (Cmd::Train(t), Some(("train", m))) = (&mut cli.command, matches.subcommand()) {
        t.overrides = collect_overrides(m, &keys);
    }
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Cmd::GenData(a) => commands::gen_data(&a, &argv),
        Cmd::Train(a) => commands::train(&a, &argv),
        Cmd::Sample(a) => commands::sample(&a, &argv),
        Cmd::Eval(a) => commands::eval(&a, &argv),
        Cmd::Gradcheck(a) => commands::gradcheck(&a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
