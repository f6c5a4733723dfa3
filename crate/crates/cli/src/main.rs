mod args;
mod commands;
mod config;
mod manifest;

use std::io::Write;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};

/// Marks failures caused by the caller's input rather than by the tool.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

pub fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// 2 for bad input (files, formats, arguments), 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<std::io::Error>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<medkgqa::Error>() {
            return match e {
                medkgqa::Error::Shape { .. } | medkgqa::Error::Contract(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .format_timestamp(None)
        .init();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, sub),
        Command::TrainKg(a) => commands::train_kg(a, sub),
        Command::BuildGraph(a) => commands::build_graph(a, sub),
        Command::TrainReader(a) => commands::train_reader(a, sub),
        Command::EvalReader(a) => commands::eval_reader(a, sub),
        Command::Sweep(a) => commands::sweep(a, sub),
        Command::Ablate(a) => commands::ablate(a, sub),
        Command::Cv(a) => commands::cv(a, sub),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let _ = writeln!(std::io::stderr(), "medkgqa {name}: {err:#}");
            if code == 2 {
                let _ = writeln!(std::io::stderr(), "run `medkgqa {name} --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
