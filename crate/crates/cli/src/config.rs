//! Config file loading, flag overrides and the resolved-config snapshot.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

pub const SNAPSHOT_FILE: &str = "run_config.json";

/// Merges `[section]` of a TOML config file under the command-line flags.
/// Flags that were given win; unset flags fall back to the file.
pub fn merge<T: Serialize + DeserializeOwned>(
    flags: &T,
    file: Option<&Path>,
    section: &str,
) -> anyhow::Result<T> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let doc: toml::Table = toml::from_str(&text)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    let mut merged: Map<String, Value> = match doc.get(section) {
        Some(t) => match serde_json::to_value(t)? {
            Value::Object(m) => m,
            _ => return Err(UsageError(format!("config section [{section}] is not a table")).into()),
        },
        None => Map::new(),
    };
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() && v != Value::Bool(false) {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| UsageError(format!("config section [{section}]: {e}")).into())
}

#[derive(Serialize)]
struct Snapshot<'a, T> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    match_rules: Option<&'static str>,
}

/// Creates `out_dir` and writes the resolved configuration with the tool version.
pub fn write_snapshot<T: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &T,
    match_rules: Option<&'static str>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let snap = Snapshot {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        match_rules,
    };
    let path = out_dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&snap)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, UsageError> {
    v.clone()
        .ok_or_else(|| UsageError(format!("missing required option --{flag}")))
}

pub fn out_dir(v: &Option<PathBuf>) -> PathBuf {
    v.clone().unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(rename_all = "kebab-case")]
    struct Opts {
        seed: Option<u64>,
        alpha: Option<f64>,
        name: Option<String>,
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[run]\nseed = 3\nalpha = 2.0\n[other]\nseed = 9\n").unwrap();
        let flags = Opts {
            alpha: Some(0.5),
            ..Opts::default()
        };
        let got = merge(&flags, Some(&p), "run").unwrap();
        assert_eq!(
            got,
            Opts {
                seed: Some(3),
                alpha: Some(0.5),
                name: None
            }
        );
    }

    #[test]
    fn unknown_types_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[run]\nseed = \"x\"\n").unwrap();
        let err = merge(&Opts::default(), Some(&p), "run").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
