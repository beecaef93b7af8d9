mod args;
mod commands;
mod config_file;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use commands::Conflict;

fn envelope(code: &str, message: String, details: serde_json::Value) -> ExitCode {
    let mut err = json!({ "code": code, "message": message });
    if !details.is_null() {
        err["details"] = details;
    }
    eprintln!("{}", json!({ "error": err }));
    ExitCode::from(if code == "usage" { 2 } else { 1 })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Score(a) => commands::score(a),
        Command::Prune(a) => commands::prune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Compare(a) => commands::compare(a),
        Command::Report(a) => commands::report_cmd(a),
    }
}

fn main() -> ExitCode {
    let argv = match config_file::merge(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return envelope("config", format!("{e:#}"), serde_json::Value::Null),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            return envelope("usage", msg.trim().to_string(), serde_json::Value::Null);
        }
    };
    if cli.jobs == 0 {
        return envelope("usage", "--jobs must be at least 1".into(), serde_json::Value::Null);
    }
    // The pool may already exist if a test harness built one; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}");
            if let Some(core) = e.downcast_ref::<mucrasp_core::Error>() {
                let details = match core {
                    mucrasp_core::Error::Infeasible {
                        required,
                        budget,
                        binding,
                    } => json!({ "required": required, "budget": budget, "binding": binding }),
                    _ => serde_json::Value::Null,
                };
                envelope(core.code(), message, details)
            } else if e.downcast_ref::<Conflict>().is_some() {
                envelope("conflicting_flags", message, serde_json::Value::Null)
            } else {
                envelope("error", message, serde_json::Value::Null)
            }
        }
    }
}
