// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline configuration: one TOML table per stage, a root seed and an
//! output directory. Any value can be overridden from the command line
//! with a dotted key.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const STAGES: &[&str] = &[
    "synth",
    "select_layer",
    "stitch",
    "sae",
    "transfer",
    "eval",
    "probe",
    "steer",
    "features",
    "scaling",
];

/// One violated constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub key: String,
    pub message: String,
}

impl Issue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<Issue> for CliError {
    fn from(i: Issue) -> Self {
        CliError::config(i.key, i.message)
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    pub root: Table,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::config("config", format!("{}: {}", p.display(), one_line(&e.to_string()))))?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            set_dotted(&mut root, key, parse_value(raw))?;
        }
        for key in root.keys() {
            let known = key == "seed" || key == "out_dir" || STAGES.contains(&key.as_str());
            if !known {
                return Err(CliError::config(key.clone(), "unknown key"));
            }
            if STAGES.contains(&key.as_str()) && !root[key].is_table() {
                return Err(CliError::config(key.clone(), "expected a table"));
            }
        }
        let seed = match root.get("seed") {
            None => 0,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(CliError::config("seed", "expected a non-negative integer")),
        };
        let out_dir = match root.get("out_dir") {
            None => PathBuf::from("out"),
            Some(Value::String(s)) => PathBuf::from(s),
            Some(_) => return Err(CliError::config("out_dir", "expected a string")),
        };
        Ok(Self { root, seed, out_dir })
    }

    pub fn table(&self, stage: &str) -> Table {
        self.root.get(stage).and_then(Value::as_table).cloned().unwrap_or_default()
    }

    /// Deserialize a stage table, rejecting keys the stage does not know.
    pub fn stage<T: DeserializeOwned + Serialize>(&self, stage: &str) -> CliResult<T> {
        let table = self.table(stage);
        let parsed: T = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(stage, one_line(e.message())))?;
        let known = Value::try_from(&parsed)
            .ok()
            .and_then(|v| v.as_table().cloned())
            .unwrap_or_default();
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(CliError::config(format!("{stage}.{k}"), "unknown key"));
        }
        Ok(parsed)
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Dotted keys with their raw values, in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Split `--key=value` and `--key value` pairs. `--config` is returned
/// separately.
pub fn parse_overrides(args: &[String]) -> CliResult<(Option<PathBuf>, Overrides)> {
    let mut config = None;
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            return Err(CliError::config(a.clone(), "expected --key=value or --key value"));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::config(body, "missing value"))?;
                (body.to_string(), v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::config(a.clone(), "malformed key"));
        }
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            out.push((key, value));
        }
    }
    Ok((config, out))
}

/// TOML literal if it parses as one, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(parts[..=i].join("."), "not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Resolve an optional path against a default under `out_dir`.
pub fn path_or(cfg: &Config, p: &Option<PathBuf>, default: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.out(default))
}

pub fn paths_or(cfg: &Config, p: &Option<Vec<PathBuf>>, default: &[&str]) -> Vec<PathBuf> {
    p.clone()
        .unwrap_or_else(|| default.iter().map(|d| cfg.out(d)).collect())
}

/// Issue for each listed path that is not a readable file.
pub fn check_files(key: &str, paths: &[PathBuf], issues: &mut Vec<Issue>) {
    if paths.is_empty() {
        issues.push(Issue::new(key, "at least one path is required"));
    }
    for p in paths {
        if !p.is_file() {
            issues.push(Issue::new(key, format!("file not found: {}", p.display())));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_both_forms() {
        let args: Vec<String> = ["--seed", "7", "--stitch.learning_rate=0.01", "--config=x.toml", "--out_dir", "o"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (cfg, ov) = parse_overrides(&args).unwrap();
        assert_eq!(cfg, Some(PathBuf::from("x.toml")));
        let c = Config::load(None, &ov).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.out_dir, PathBuf::from("o"));
        assert_eq!(c.table("stitch")["learning_rate"].as_float(), Some(0.01));
    }

    #[test]
    fn bad_keys_are_named() {
        let e = Config::load(None, &[("bogus".into(), "1".into())]).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("bogus"));
        let e = parse_overrides(&["--seed".to_string()]).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("seed"));
        let e = Config::load(None, &[("seed".into(), "-1".into())]).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("seed"));
    }

    #[test]
    fn strings_fall_back() {
        assert_eq!(parse_value("out/a.axt"), Value::String("out/a.axt".into()));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }
}
