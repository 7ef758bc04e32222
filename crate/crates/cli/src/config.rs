//! `key = value` config files and the resolved configuration of a run.
//!
//! File entries are turned into long flags placed before the user's own
//! arguments; every subcommand lets later flags override earlier ones, so
//! the command line wins.

use std::ffi::OsString;
use std::path::Path;

use clap::{ArgAction, ArgMatches, Command, ValueHint};

use crate::error::{CliError, CliResult};

/// Parses config text into `(key, value, line)` triples.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::usage(format!("line {}: expected 'key = value', got '{line}'", i + 1)));
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::usage(format!("line {}: empty key", i + 1)));
        }
        out.push((key, value.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut iter = args.iter();
    while let Some(a) = iter.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return iter.next().cloned();
        }
        if let Some(rest) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(rest.into());
        }
    }
    None
}

/// Splices the entries of the `--config` file (if any) into `argv` ahead of
/// the subcommand's own arguments.
pub fn expand_argv(root: &Command, argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let Some(sub) = argv[1].to_str().and_then(|name| root.find_subcommand(name)) else {
        return Ok(argv);
    };
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(e.to_string()).at(path))?;
    let mut injected = Vec::new();
    for (key, value, line) in parse_config(&text).map_err(|e| e.at(path))? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config" && key != "help")
            .ok_or_else(|| CliError::usage(format!("line {line}: unknown key '{key}' for '{}'", sub.get_name())).at(path))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                other => {
                    return Err(CliError::usage(format!("line {line}: '{key}' expects true or false, got '{other}'")).at(path))
                }
            }
        } else {
            injected.push(OsString::from(format!("--{key}={value}")));
        }
    }
    let mut out = argv[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ResolvedEntry {
    pub key: String,
    pub value: String,
    /// File-system location rather than a setting that affects results.
    pub is_path: bool,
}

/// Every option of the subcommand with its final value, in declaration order.
pub fn resolve(sub: &Command, matches: &ArgMatches) -> Vec<ResolvedEntry> {
    let mut out = Vec::new();
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else {
            continue;
        };
        if matches!(id, "help" | "version") {
            continue;
        }
        let value = match arg.get_action() {
            ArgAction::SetTrue => Some(matches.get_flag(id).to_string()),
            _ => matches.get_raw(id).map(|vals| {
                vals.map(|v| v.to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join(",")
            }),
        };
        if let Some(value) = value {
            let is_path = long == "config"
                || matches!(
                    arg.get_value_hint(),
                    ValueHint::FilePath | ValueHint::DirPath | ValueHint::AnyPath
                );
            out.push(ResolvedEntry {
                key: long.to_string(),
                value,
                is_path,
            });
        }
    }
    out
}

/// `key = value` lines, which can be fed back through `--config`.
pub fn render(entries: &[ResolvedEntry], include_paths: bool) -> Vec<String> {
    entries
        .iter()
        .filter(|e| include_paths || !e.is_path)
        .map(|e| format!("{} = {}", e.key, e.value))
        .collect()
}
