//! `--config FILE` support.
//!
//! The file holds `key = value` lines, where `key` is a long flag name with
//! or without the leading dashes (underscores and hyphens are equivalent).
//! Blank lines and lines starting with `#` are ignored. `key = true` sets a
//! switch and `key = false` leaves it unset. Entries are spliced into the
//! argument list right after the subcommand, skipping any flag that already
//! appears on the command line, so explicit flags always win.

use std::ffi::OsString;
use std::fs;

fn flag_name(token: &str) -> Option<&str> {
    let rest = token.strip_prefix("--")?;
    Some(rest.split_once('=').map_or(rest, |(k, _)| k))
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut iter = args.iter();
    while let Some(tok) = iter.next() {
        let s = tok.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return iter.next().cloned();
        }
        if let Some(path) = s.strip_prefix("--config=") {
            return Some(path.into());
        }
    }
    None
}

/// Parses config text into `(flag, value)` pairs with normalized flag names.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim().trim_start_matches('-').replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if key == "config" {
            return Err(format!(
                "line {}: config files cannot include other config files",
                i + 1
            ));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        entries.push((key, value.to_string()));
    }
    Ok(entries)
}

/// Splices `entries` into `args` after the subcommand, skipping flags that
/// `args` already sets.
pub fn splice(args: Vec<OsString>, entries: &[(String, String)]) -> Vec<OsString> {
    let given: Vec<String> = args
        .iter()
        .skip(2)
        .filter_map(|t| flag_name(&t.to_string_lossy()).map(str::to_string))
        .collect();
    let mut injected = Vec::new();
    for (key, value) in entries {
        if given.iter().any(|g| g == key) {
            continue;
        }
        match value.as_str() {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => injected.push(OsString::from(format!("--{key}={value}"))),
        }
    }
    let mut out = Vec::with_capacity(args.len() + injected.len());
    let mut rest = args.into_iter();
    out.extend(rest.by_ref().take(2));
    out.extend(injected);
    out.extend(rest);
    out
}

/// Applies the config file named by `--config`, if any.
pub fn apply(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    if args.len() < 2 || args[1].to_string_lossy().starts_with('-') {
        return Ok(args);
    }
    let Some(path) = config_path(&args[2..]) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| format!("config file {}: {e}", path.to_string_lossy()))?;
    let entries =
        parse(&text).map_err(|e| format!("config file {}: {e}", path.to_string_lossy()))?;
    Ok(splice(args, &entries))
}
