mod args;
mod commands;
mod config;
mod error;
mod manifest;
mod table;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use config::ConfigFile;
use error::{CliError, Exit};

fn run(cli: Cli) -> Result<Exit, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(e.to_string()))?;
    }
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    match &cli.command {
        Command::BuildVocab(a) => commands::build_vocab_cmd(a, &cfg),
        Command::Train(a) => commands::train_cmd(a, &cfg),
        Command::Score(a) => commands::score_cmd(a, &cfg),
        Command::Baselines(a) => commands::baselines_cmd(a, &cfg),
        Command::Correlate(a) => commands::correlate_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Exit::Input.into() } else { Exit::Success.into() };
        }
    };
    match run(cli) {
        Ok(code) => code.into(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit.into()
        }
    }
}
