mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use climprobe_cli::error::{CliError, CliResult, EXIT_USAGE};
use manifest::{Manifest, Recorder};

fn clap_error(e: &clap::Error) -> CliError {
    let text = e.render().to_string();
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim_start_matches("error: ")
        .to_string();
    let kind = match e.kind() {
        ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => "unknown_flag",
        _ => "usage",
    };
    CliError::new(kind, EXIT_USAGE, line)
}

fn execute(cmd: Command) -> CliResult<()> {
    if let Command::Serve(a) = &cmd {
        return commands::serve(a);
    }
    let mut rec = Recorder::default();
    let out = commands::run(&cmd, &mut rec)?;
    let outputs: Vec<_> = rec.outputs().to_vec();
    rec.finish(&out.manifest, &cmd, out.resolved)?;
    println!(
        "{}",
        json!({
            "status": "ok",
            "command": cmd.name(),
            "manifest": out.manifest,
            "outputs": outputs,
            "summary": out.summary,
        })
    );
    Ok(())
}

fn replay(cli: Cli) -> CliResult<()> {
    let path = cli.config.expect("checked by caller");
    let m = Manifest::load(&path)?;
    m.verify_inputs()?;
    let mut cmd = m.to_command()?;
    if let Some(out) = cli.output {
        if !cmd.set_output(out) {
            return Err(CliError::usage(format!(
                "`{}` writes no outputs",
                cmd.name()
            )));
        }
    }
    execute(cmd)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            _ => {
                let err = clap_error(&e);
                eprintln!("{}", err.to_json());
                return ExitCode::from(err.code as u8);
            }
        },
    };
    let result = match (cli.command.clone(), cli.config.is_some()) {
        (Some(cmd), false) => execute(cmd),
        (None, true) => replay(cli),
        _ => Err(CliError::usage(
            "give a subcommand, or --config <manifest> to replay a run (see --help)",
        )),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
