//! `key=value` config files and the printed resolved configuration.
//!
//! A config file supplies flags by their long names. Its entries are spliced
//! into the argument list ahead of the real command-line flags; since every
//! flag may repeat with the last occurrence winning, the command line takes
//! precedence.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, ArgMatches, Command};

use crate::UsageError;

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(UsageError(format!("config line {}: expected key=value", n + 1)));
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Value of `--config` in `args`, if any.
fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Splices the entries of the `--config` file (if given) in front of the
/// subcommand's own flags.
pub fn expand(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {}", Path::new(&path).display()))
        .map_err(|e| UsageError(format!("{e:#}")))?;
    let entries = parse_file(&text)?;
    let Some((pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s)))
    else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| UsageError(format!("config key `{key}` is not a flag of `{}`", sub.get_name())))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                other => bail!(UsageError(format!("config key `{key}`: expected true or false, got `{other}`"))),
            }
        } else {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        }
    }
    let mut out = args;
    out.splice(pos + 1..pos + 1, injected);
    Ok(out)
}

/// Every flag of `sub` with its effective value, as `key=value` lines that
/// can be fed back through `--config`.
pub fn resolved(sub: &Command, matches: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(long, "config" | "force" | "help" | "version") {
            continue;
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            out.push((long.to_string(), matches.get_flag(id).to_string()));
        } else if let Some(raw) = matches.get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push((long.to_string(), vals.join(",")));
        }
    }
    out
}

pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let got = parse_file("# run\nlr = 0.5\n\nbatch_size=4\n").unwrap();
        assert_eq!(got, vec![("lr".into(), "0.5".into()), ("batch-size".into(), "4".into())]);
        assert!(parse_file("novalue").is_err());
    }
}
