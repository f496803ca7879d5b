mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};

use config::{RunConfig, KEYS};

/// Why a command stopped. Usage errors exit 1, runtime failures exit 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Stage(&'static str, anyhow::Error),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "error [usage]: {m}"),
            Failure::Stage(stage, e) => write!(f, "error [{stage}]: {e:#}"),
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(stage, e.into()))
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

const COMMANDS: &[(&str, &str)] = &[
    ("prepare", "synthesize and cache images for every sentence of the datasets"),
    ("pretrain", "fusion-only denoising pretraining with the backbone frozen"),
    ("finetune", "full fine-tuning with validation checkpoint selection"),
    ("generate", "decode the test set"),
    ("evaluate", "score generated texts against the test references"),
    ("sweep-theta", "gated fraction (and optionally BLEU-4) across a theta grid"),
    ("fewshot", "repeated training on small random subsets of the training set"),
];

fn cli() -> Command {
    let mut cmd = Command::new("visaug")
        .about("Visually augmented text generation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key=value config file; flags override it"),
        );
    for (key, _, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .global(true)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help(*help)
                .hide_short_help(true),
        );
    }
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

fn run() -> Result<(), Failure> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(()),
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => Err(usage("no command given")),
                _ => Err(usage("invalid arguments")),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let mut cfg = RunConfig::default();
    if let Some(path) = sub.get_one::<String>("config") {
        cfg.apply_file(path.as_ref()).map_err(usage)?;
    }
    for (key, _, _) in KEYS {
        if let Some(v) = sub.get_one::<String>(key) {
            cfg.set(key, v).map_err(usage)?;
        }
    }
    commands::dispatch(name, &cfg)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            match f {
                Failure::Usage(_) => ExitCode::from(1),
                Failure::Stage(..) => ExitCode::from(2),
            }
        }
    }
}
