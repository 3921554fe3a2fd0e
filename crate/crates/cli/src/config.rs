//! Config-file support.
//!
//! A config file is flat `key = value` TOML whose keys are long flag names
//! (`bootstrap = 200`, `covariates = ["age", "educ"]`, `sandwich = true`).
//! Its entries are spliced into argv right after the subcommand, ahead of the
//! user's own flags, so flags given on the command line override the file.

use std::path::Path;

const SUBCOMMANDS: [&str; 4] = ["fit", "simulate", "diagnose", "convert"];

/// Flags that take a value when they appear before the subcommand.
const GLOBAL_VALUED: [&str; 2] = ["--config", "--workers"];

/// Path given by `--config`, if any.
pub fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn subcommand_position(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if GLOBAL_VALUED.contains(&a) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&a) {
            return Some(i);
        }
        if !a.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}

fn value_text(key: &str, v: &toml::Value) -> Result<String, String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Array(items) => items
            .iter()
            .map(|x| value_text(key, x))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.join(",")),
        _ => Err(format!("config key '{key}': unsupported value {v}")),
    }
}

/// Flags equivalent to the file's entries.
pub fn file_args(text: &str) -> Result<Vec<String>, String> {
    let table: toml::Table = text.parse().map_err(|e| format!("config file: {e}"))?;
    let mut args = Vec::new();
    for (key, v) in &table {
        if key == "config" {
            return Err("config file: 'config' cannot be set from a config file".into());
        }
        match v {
            toml::Value::Boolean(true) => args.push(format!("--{key}")),
            toml::Value::Boolean(false) => {}
            toml::Value::Table(_) => {
                return Err(format!("config file: '{key}' is a table; only flat keys are allowed"))
            }
            other => {
                args.push(format!("--{key}"));
                args.push(value_text(key, other)?);
            }
        }
    }
    Ok(args)
}

/// argv with the config file's flags spliced in after the subcommand.
pub fn expand(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config file {path}: {e}"))?;
    let extra = file_args(&text)?;
    let Some(pos) = subcommand_position(&argv) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

/// TOML string literal.
pub fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}
