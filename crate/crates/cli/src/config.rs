//! key=value configuration files, merged into the argument list so that
//! flags given on the command line take precedence.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;

#[derive(Debug)]
pub struct ConfigError(pub String);

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("config line {}: expected key=value", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError(format!("config line {}: empty key", i + 1)));
        }
        entries.push((key, value.trim().to_string()));
    }
    Ok(entries)
}

fn long_flags(sub: &clap::Command) -> BTreeSet<String> {
    sub.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_owned))
        .collect()
}

fn is_switch(sub: &clap::Command, long: &str) -> bool {
    sub.get_arguments()
        .find(|a| a.get_long() == Some(long))
        .is_some_and(|a| matches!(a.get_action(), clap::ArgAction::SetTrue))
}

/// Finds `--config FILE` or `--config=FILE` in raw arguments.
pub fn find_config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Inserts config entries directly after the subcommand name. Keys given
/// on the command line or belonging to other subcommands are skipped;
/// unknown keys are errors.
pub fn merge_config(args: Vec<OsString>, path: &Path) -> Result<Vec<OsString>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let entries = parse_config(&text)?;
    let cmd = Cli::command();
    let Some(pos) = args
        .iter()
        .position(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()).is_some())
    else {
        return Ok(args);
    };
    let sub = cmd
        .find_subcommand(args[pos].to_string_lossy().as_ref())
        .expect("position found a subcommand");
    let own = long_flags(sub);
    let all: BTreeSet<String> = cmd.get_subcommands().flat_map(long_flags).collect();

    let given: BTreeSet<String> = args[pos + 1..]
        .iter()
        .filter_map(|a| {
            let s = a.to_string_lossy();
            let flag = s.strip_prefix("--")?;
            Some(flag.split_once('=').map_or(flag, |(k, _)| k).to_owned())
        })
        .collect();
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        if !all.contains(&key) {
            return Err(ConfigError(format!("unknown config key '{key}'")));
        }
        if !own.contains(&key) || given.contains(&key) {
            continue;
        }
        if is_switch(sub, &key) {
            match value.as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                other => return Err(ConfigError(format!("config key '{key}' expects true or false, got '{other}'"))),
            }
        } else {
            injected.push(OsString::from(format!("--{key}={value}")));
        }
    }
    let mut merged = args[..=pos].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&args[pos + 1..]);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_comments() {
        let e = parse_config("# defaults\nh_x = 2\n\nmethod=rtb\n").unwrap();
        assert_eq!(e, vec![("h-x".into(), "2".into()), ("method".into(), "rtb".into())]);
        assert!(parse_config("h_x 2").is_err());
    }
}
