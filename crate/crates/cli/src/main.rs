mod args;
mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::CliError;

fn parse(raw: Vec<OsString>) -> Result<Cli, CliError> {
    let raw = match config::find_config_path(&raw) {
        Some(path) => config::merge_config(raw, &PathBuf::from(path)).map_err(|e| CliError::Usage(e.0))?,
        None => raw,
    };
    Cli::try_parse_from(raw).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            std::process::exit(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 });
        }
        _ => CliError::Usage(e.render().to_string().trim_end().trim_start_matches("error: ").to_string()),
    })
}

fn run(cli: &Cli) -> Result<String, CliError> {
    log::debug!("running {}", cli.command.name());
    match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Cv(a) => commands::cv(a),
        Command::Weights(a) => commands::weights(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = parse(std::env::args_os().collect()).and_then(|cli| run(&cli));
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut lines = e.message().lines();
            eprintln!("ERROR: {}", lines.next().unwrap_or_default());
            for line in lines {
                eprintln!("{line}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
