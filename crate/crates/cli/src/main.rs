//! `taf`: synthetic data, training, segmentation, evaluation and inspection.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use crate::commands::InspectWhat;
use crate::config::{flag_name, RunConfig, KEYS};
use crate::error::{CliError, CliResult};

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.args_override_self(true).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key=value config file"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .allow_hyphen_values(true)
                .help(*help),
        )
    })
}

fn cli() -> Command {
    Command::new("taf")
        .about("Unsupervised temporal action segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(Command::new("synth").about("Generate a synthetic dataset")))
        .subcommand(with_keys(Command::new("train").about("Train a model on one activity")))
        .subcommand(with_keys(
            Command::new("segment").about("Segment videos with a checkpoint"),
        ))
        .subcommand(with_keys(
            Command::new("eval").about("Score predictions against ground truth"),
        ))
        .subcommand(with_keys(
            Command::new("inspect")
                .about("Dump priors, pseudo-label codes or attention maps")
                .arg(
                    Arg::new("what")
                        .required(true)
                        .value_parser(["priors", "codes", "attention"]),
                ),
        ))
}

/// Defaults, then the config file, then `TAF_` variables, then flags.
fn resolve(matches: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    for (key, _) in KEYS {
        if let Some(value) = matches.get_one::<String>(key) {
            cfg.set(key, value)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(name: &str, matches: &ArgMatches) -> CliResult<()> {
    let cfg = resolve(matches)?;
    match name {
        "synth" => commands::synth(&cfg),
        "train" => commands::train_cmd(&cfg),
        "segment" => commands::segment(&cfg),
        "eval" => commands::eval(&cfg),
        "inspect" => {
            let what = match matches.get_one::<String>("what").map(String::as_str) {
                Some("codes") => InspectWhat::Codes,
                Some("attention") => InspectWhat::Attention,
                _ => InspectWhat::Priors,
            };
            commands::inspect(&cfg, what)
        }
        _ => unreachable!("clap restricts subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            let err = CliError::config(first);
            eprintln!("{err}");
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.txt");
        std::fs::write(&file, "lr=0.01\nseed=4\n").unwrap();
        let m = cli()
            .try_get_matches_from(["taf", "train", "--config", file.to_str().unwrap(), "--seed", "9"])
            .unwrap();
        let cfg = resolve(m.subcommand_matches("train").unwrap()).unwrap();
        assert_eq!((cfg.lr, cfg.seed), (0.01, 9));
    }
}
