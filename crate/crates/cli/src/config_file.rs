//! Flat `key=value` config files. Keys are flag names without the leading
//! dashes; values are spliced into argv after the subcommand unless the
//! same flag was given on the command line.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, CommandFactory};

use crate::args::Cli;

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", i + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

fn given(argv: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    argv.iter()
        .any(|a| a == &flag || a.starts_with(&format!("{flag}=")))
}

/// argv with the config file's entries inserted after the subcommand.
pub fn merge(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(Path::new(&path)).with_context(|| format!("reading config {path}"))?;
    let entries = parse(&text)?;
    let cmd = Cli::command();
    let Some((pos, sub)) = argv
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s.clone())))
    else {
        return Ok(argv);
    };
    let known_anywhere = |key: &str| {
        cmd.get_arguments()
            .chain(cmd.get_subcommands().flat_map(|s| s.get_arguments()))
            .any(|a| a.get_long() == Some(key))
    };
    let mut extra = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()));
        let Some(arg) = arg else {
            if known_anywhere(&key) {
                continue;
            }
            bail!("config key `{key}` is not a known flag");
        };
        if given(&argv, &key) {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => extra.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                other => bail!("config key `{key}` expects true or false, got `{other}`"),
            }
        } else {
            extra.push(format!("--{key}"));
            extra.push(value);
        }
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, extra);
    Ok(out)
}
