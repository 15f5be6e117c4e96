//! Command-line front end: `adapt`, `eval`, `stats`, `check-tables`,
//! `convert`, and `fixture`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure (including runs that completed with aborted episodes).

pub mod adapt;
pub mod commands;
pub mod fixture;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{parser::ValueSource, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use boxttt_core::{AnsReduction, BackboneSpec};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Error raised by the CLI itself, tagged with its exit class.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numerical(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) | Self::Data(m) | Self::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => EXIT_CONFIG,
                Failure::Data(_) => EXIT_DATA,
                Failure::Numerical(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<boxttt_core::Error>() {
            use boxttt_core::Error as E;
            return match e {
                E::Config(_) | E::UnknownBackbone(_) | E::Unavailable(_) | E::Script(_) => EXIT_CONFIG,
                E::NonFinite(_) | E::BackboneMutated { .. } => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(
    name = "boxttt",
    version,
    about = "Per-sample soft-prompt adaptation for visual question answering"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run adaptation episodes over a dataset and score both conditions.
    Adapt(AdaptArgs),
    /// Score a predictions file against a dataset.
    Eval(commands::EvalArgs),
    /// Per-split image and question counts.
    Stats(commands::StatsArgs),
    /// Check the shipped result tables for internal consistency.
    CheckTables(commands::CheckTablesArgs),
    /// Convert a native benchmark release to canonical JSON lines.
    Convert(commands::ConvertArgs),
    /// Write a synthetic dataset with generated images.
    Fixture(fixture::FixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    /// Canonical JSON-lines dataset.
    #[arg(long, required_unless_present = "config")]
    pub dataset: Option<PathBuf>,
    /// Keep only records of this dataset.
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Keep only records of this split.
    #[arg(long)]
    pub split: Option<String>,
    /// Grounding backbone: toy, scripted:<path>, viscot-stub.
    #[arg(long, default_value = "toy")]
    pub grounding: BackboneSpec,
    /// Answer backbone: toy, scripted:<path>, llava-stub.
    #[arg(long, default_value = "toy")]
    pub answerer: BackboneSpec,
    /// Embedding width of toy backbones.
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
    /// Mini-epochs per episode.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// SGD step size for the evidence prompts.
    #[arg(long, default_value_t = 1e-3)]
    pub lr_vis: f64,
    /// SGD step size for the answer prompts.
    #[arg(long, default_value_t = 5e-4)]
    pub lr_ans: f64,
    /// Teacher EMA decay, strictly between 0 and 1.
    #[arg(long, default_value_t = 0.9)]
    pub ema_decay: f64,
    /// Evidence prompt length in tokens.
    #[arg(long, default_value_t = 24)]
    pub evidence_tokens: usize,
    /// Answer prompt length in tokens.
    #[arg(long, default_value_t = 32)]
    pub answer_tokens: usize,
    /// Greedy decoding limit for answers.
    #[arg(long, default_value_t = 128)]
    pub max_answer_len: usize,
    /// Padded length of box strings.
    #[arg(long, default_value_t = 32)]
    pub box_pad_len: usize,
    /// Single-pass grounding: the first box is its own target.
    #[arg(long)]
    pub no_evidence_consistency: bool,
    /// Tie the teacher to the student instead of averaging.
    #[arg(long)]
    pub no_ema_teacher: bool,
    /// Combine the two view losses by sum or mean.
    #[arg(long, default_value = "sum")]
    pub ans_reduction: AnsReduction,
    /// Seeds the toy backbone weights.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Carry prompts across questions about the same image.
    #[arg(long)]
    pub share_prompts_per_image: bool,
    /// Which conditions to run.
    #[arg(long, value_enum, default_value = "both")]
    pub conditions: adapt::Conditions,
    /// Model label used in reports; defaults to "<grounding>+<answerer>".
    #[arg(long)]
    pub model_name: Option<String>,
    /// Write the final prompts of every episode under <out>/prompts.
    #[arg(long)]
    pub save_prompts: bool,
    /// Replay a config.json written by an earlier run.
    #[arg(long, conflicts_with = "dataset")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Flags that may accompany `--config`.
const REPLAY_FLAGS: &[&str] = &["config", "out", "threads", "save_prompts", "verbose"];

fn explicit_run_flags(m: &ArgMatches) -> Vec<String> {
    let cmd = Cli::command();
    let adapt = cmd.find_subcommand("adapt").expect("adapt subcommand");
    adapt
        .get_arguments()
        .map(|a| a.get_id().as_str())
        .filter(|id| !REPLAY_FLAGS.contains(id))
        .filter(|id| m.value_source(id) == Some(ValueSource::CommandLine))
        .map(|id| format!("--{}", id.replace('_', "-")))
        .collect()
}

/// Parses arguments; usage errors become [`Failure::Config`]. Help and
/// version requests are returned as `Ok(None)` after printing.
pub fn parse<I, T>(args: I) -> Result<Option<Cli>>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(None);
            }
            return Err(Failure::Config(e.render().to_string()).into());
        }
    };
    if let Some(("adapt", sub)) = matches.subcommand() {
        if sub.contains_id("config") && sub.get_one::<PathBuf>("config").is_some() {
            let extra = explicit_run_flags(sub);
            if !extra.is_empty() {
                return Err(
                    Failure::Config(format!("--config replays a run; drop {}", extra.join(", "))).into()
                );
            }
        }
    }
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(Some(cli))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Adapt(args) => adapt::cmd_adapt(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Stats(args) => commands::cmd_stats(&args),
        Command::CheckTables(args) => commands::cmd_check_tables(&args),
        Command::Convert(args) => commands::cmd_convert(&args),
        Command::Fixture(args) => fixture::cmd_fixture(&args),
    }
}

/// Entry point shared by the binary and tests. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(args) {
        Ok(Some(cli)) => cli,
        Ok(None) => return 0,
        Err(e) => {
            eprintln!("{e}");
            return exit_code(&e);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        let code = |e: anyhow::Error| exit_code(&e);
        assert_eq!(code(Failure::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(code(anyhow::Error::new(Failure::Numerical("x".into())).context("outer")), EXIT_NUMERICAL);
        assert_eq!(code(boxttt_core::Error::NonFinite("loss".into()).into()), EXIT_NUMERICAL);
        assert_eq!(code(boxttt_core::Error::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(code(std::io::Error::other("disk").into()), EXIT_DATA);
    }

    #[test]
    fn replay_rejects_run_flags_but_not_output_flags() {
        let base = ["boxttt", "adapt", "--config", "c.json", "--out", "o"];
        assert!(parse(base).unwrap().is_some());
        assert!(parse(base.iter().chain(&["--threads", "2", "-v"])).unwrap().is_some());
        let err = parse(base.iter().chain(&["--seed", "1"])).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        assert!(err.to_string().contains("--seed"));
    }
}
