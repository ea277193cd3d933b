mod args;
mod commands;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::filter::LevelFilter;

use args::{Cli, Command};

/// Usage and input errors exit 1; runtime failures (backend, I/O) exit 2.
fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => LevelFilter::WARN,
        1 => LevelFilter::INFO,
        _ => LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e
                .downcast_ref::<kbvqa_core::Error>()
                .is_none_or(kbvqa_core::Error::is_input_error);
            ExitCode::from(if input { 1 } else { 2 })
        }
    }
}

fn dispatch(command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest(a) => commands::ingest(a)?,
        Command::RankCaptions(a) => commands::rank_captions(a)?,
        Command::SelectShots(a) => commands::select_shots(a)?,
        Command::BuildPrompts(a) => commands::build_prompts(a)?,
        Command::Run(a) => commands::run(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Ablate(a) => commands::ablate(a)?,
        Command::Replay(a) => commands::replay(a)?,
    }
    Ok(())
}
