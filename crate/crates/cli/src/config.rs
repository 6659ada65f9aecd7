//! Settings resolution and run directories.
//!
//! Precedence, lowest first: built-in defaults, the `--config` JSON object,
//! then explicit flags. Only keys that exist in the defaults are accepted.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// A failure with its process exit code: 2 for usage and configuration
/// errors, 1 for everything the pipeline rejects.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn to_map<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => panic!("settings must serialize to a JSON object"),
    }
}

/// Reads a flat JSON object from disk.
pub fn read_config_file(path: &Path) -> CliResult<Map<String, Value>> {
    let raw = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_slice(&raw) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::Usage(format!("config {} must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}

/// Layers `file` and then `flags` over `defaults`, rejecting keys the
/// defaults do not have.
pub fn merge(
    mut defaults: Map<String, Value>,
    file: Option<&Map<String, Value>>,
    flags: &Map<String, Value>,
) -> CliResult<Map<String, Value>> {
    for layer in file.into_iter().chain(std::iter::once(flags)) {
        for (k, v) in layer {
            match defaults.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(CliError::Usage(format!("unknown config key `{k}`"))),
            }
        }
    }
    Ok(defaults)
}

/// Picks the keys of `T` out of a merged map.
pub fn extract<T: DeserializeOwned + Serialize>(merged: &Map<String, Value>, template: &T) -> CliResult<T> {
    let keys = to_map(template);
    let sub: Map<String, Value> = merged
        .iter()
        .filter(|(k, _)| keys.contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    serde_json::from_value(Value::Object(sub)).map_err(|e| CliError::Usage(format!("bad config value: {e}")))
}

/// Creates the output directory for a run. An explicit `--out` must not
/// exist yet or be empty; the default is `runs/<command>-<timestamp>`
/// with a numeric suffix on collision.
pub fn create_run_dir(out: Option<&Path>, command: &str) -> CliResult<PathBuf> {
    if let Some(dir) = out {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            return Err(CliError::Failed(anyhow::anyhow!(
                "output directory {} is not empty; runs are never overwritten",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)?;
        return Ok(dir.to_path_buf());
    }
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = PathBuf::from("runs").join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes `config.json`: the command, its input paths and every resolved
/// setting.
pub fn write_resolved(dir: &Path, command: &str, inputs: Map<String, Value>, settings: &Map<String, Value>) -> CliResult<()> {
    let doc = serde_json::json!({
        "command": command,
        "inputs": inputs,
        "settings": settings,
    });
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let d = obj(json!({"a": 1, "b": 2, "c": 3}));
        let f = obj(json!({"a": 10, "b": 20}));
        let fl = obj(json!({"b": 200}));
        assert_eq!(merge(d, Some(&f), &fl).unwrap(), obj(json!({"a": 10, "b": 200, "c": 3})));
    }

    #[test]
    fn unknown_key_is_a_usage_error_naming_it() {
        let e = merge(obj(json!({"a": 1})), Some(&obj(json!({"zzz": 1}))), &Map::new()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("zzz"));
    }

    #[test]
    fn explicit_out_dir_is_never_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        create_run_dir(Some(&dir), "x").unwrap();
        fs::write(dir.join("f"), "1").unwrap();
        assert_eq!(create_run_dir(Some(&dir), "x").unwrap_err().exit_code(), 1);
    }
}
