//! Command-line front end: one binary, one subcommand per pipeline stage.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use cdcml_core::{Error, ErrorCategory};
use config::{RunConfig, ENV_PREFIX, KEYS};

/// Raised when a gradient check exceeds its tolerance.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Message prefix and process exit code for an error.
pub fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return ("numeric", 3);
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::category) {
        Some(ErrorCategory::Config) => ("config", 2),
        Some(ErrorCategory::Data) => ("data", 2),
        Some(ErrorCategory::Numeric) => ("numeric", 3),
        Some(ErrorCategory::Io) | None => ("io", 1),
    }
}

/// The error chain on one line, dropping causes already quoted by the
/// message above them.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|k| {
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .default_value(k.default)
                .help(format!("{} [env: {ENV_PREFIX}{}]", k.help, k.name.to_ascii_uppercase()))
                .help_heading("Configuration")
                .global(true)
        })
        .collect()
}

fn checkpoint_source(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("PATH")
            .required_unless_present("oracle")
            .help("model checkpoint, relative to the root"),
    )
    .arg(
        Arg::new("oracle")
            .long("oracle")
            .action(ArgAction::SetTrue)
            .conflicts_with("checkpoint")
            .help("score with ground-truth labels instead of a model"),
    )
    .arg(
        Arg::new("split")
            .long("split")
            .default_value("test")
            .value_parser(["train", "val", "test"])
            .help("split to score"),
    )
}

pub fn command() -> Command {
    Command::new("cdcml")
        .about("Cross-modal metric learning for image/music matching in valence-arousal space")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("root")
                .long("root")
                .value_name("DIR")
                .default_value(".")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("directory all configured paths are relative to"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("`key = value` configuration file, relative to the root"),
        )
        .args(key_args())
        .subcommand(Command::new("gen-synth").about("Write a seeded synthetic corpus manifest to `corpus`"))
        .subcommand(
            Command::new("build-dataset").about("Split the corpus, generate pairs, and write them to `data_dir`"),
        )
        .subcommand(Command::new("train").about("Train a model and write checkpoints and history to `out_dir`"))
        .subcommand(
            checkpoint_source(Command::new("eval").about("Score a checkpoint on one split")).arg(
                Arg::new("format")
                    .long("format")
                    .default_value("csv")
                    .value_parser(["csv", "fields"])
                    .help("table row or `key = value` lines"),
            ),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train every ablation row for every seed and tabulate test metrics")
                .arg(
                    Arg::new("rows_file")
                        .long("rows-file")
                        .value_name("FILE")
                        .help("one row per line such as `sim+cfr`; overrides `ablation_rows`"),
                ),
        )
        .subcommand(
            checkpoint_source(Command::new("match").about("Rank a split's images for one music clip"))
                .arg(Arg::new("music_id").long("music-id").required(true).help("query clip id"))
                .arg(
                    Arg::new("k")
                        .long("k")
                        .default_value("10")
                        .value_parser(value_parser!(usize))
                        .help("listing length"),
                ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic gradients against central differences")
                .arg(
                    Arg::new("trials")
                        .long("trials")
                        .default_value("100")
                        .value_parser(value_parser!(usize))
                        .help("random batches per check"),
                )
                .arg(
                    Arg::new("tolerance")
                        .long("tolerance")
                        .default_value("1e-6")
                        .value_parser(value_parser!(f64))
                        .help("maximum accepted relative error"),
                ),
        )
}

/// Defaults, then `--config`, then `CDCML_*` variables, then flags.
pub fn resolve(
    matches: &ArgMatches,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig> {
    let root: &PathBuf = matches.get_one("root").expect("defaulted");
    let mut cfg = RunConfig::defaults(root);
    if let Some(file) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(&root.join(file))?;
    }
    cfg.apply_env(env)?;
    for k in KEYS {
        if matches.value_source(k.name) == Some(ValueSource::CommandLine) {
            let v: &String = matches.get_one(k.name).expect("present");
            cfg.set(k.name, v).with_context(|| format!("flag --{}", flag_name(k.name)))?;
        }
    }
    Ok(cfg)
}

pub fn run<I, T>(
    args: I,
    env: impl IntoIterator<Item = (String, String)>,
    out: &mut dyn Write,
) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.render().to_string()).into()),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(sub, env)?;
    let workers = cfg.count("workers");
    if workers > 0 {
        // Only the first call can size the global pool; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    match name {
        "gen-synth" => commands::gen_synth(&cfg, out),
        "build-dataset" => commands::build_dataset(&cfg, out),
        "train" => commands::train(&cfg, out),
        "eval" => commands::eval(&cfg, &commands::Source::from_matches(sub), sub.get_one::<String>("split").unwrap(), sub.get_one::<String>("format").unwrap(), out),
        "ablate" => commands::ablate(&cfg, sub.get_one::<String>("rows_file").map(|s| cfg.root().join(s)).as_deref(), out),
        "match" => commands::match_clip(
            &cfg,
            &commands::Source::from_matches(sub),
            sub.get_one::<String>("split").unwrap(),
            sub.get_one::<String>("music_id").unwrap(),
            *sub.get_one::<usize>("k").unwrap(),
            out,
        ),
        "gradcheck" => commands::gradcheck(
            &cfg,
            *sub.get_one::<usize>("trials").unwrap(),
            *sub.get_one::<f64>("tolerance").unwrap(),
            out,
        ),
        other => unreachable!("unregistered subcommand {other}"),
    }
}
