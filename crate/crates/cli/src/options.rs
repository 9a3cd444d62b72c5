//! `--config` documents and `--set key=value` overrides.
//!
//! Both produce one JSON object; dotted keys nest (`clip.factor=5`). Each
//! subcommand deserializes the object into its own option struct, which
//! rejects unknown keys.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// A problem with the command line itself (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn insert_path(map: &mut Map<String, Value>, key: &str, value: Value) -> anyhow::Result<()> {
    let mut parts = key.split('.');
    let first = parts.next().filter(|k| !k.is_empty()).ok_or_else(|| usage(format!("empty key in {key:?}")))?;
    let rest: Vec<&str> = parts.collect();
    if rest.is_empty() {
        map.insert(first.to_string(), value);
        return Ok(());
    }
    let entry = map.entry(first.to_string()).or_insert_with(|| Value::Object(Map::new()));
    let Value::Object(inner) = entry else {
        return Err(usage(format!("{first} is not a section")));
    };
    insert_path(inner, &rest.join("."), value)
}

/// Merges the config file, then the overrides in order.
pub fn collect(config: Option<&Path>, sets: &[String]) -> anyhow::Result<Map<String, Value>> {
    let mut map = match config {
        None => Map::new(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(usage(format!("{} must hold a JSON object", path.display()))),
                Err(e) => return Err(usage(format!("parsing {}: {e}", path.display()))),
            }
        }
    };
    for set in sets {
        let (key, raw) = set.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {set:?}")))?;
        // bare words are strings
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        insert_path(&mut map, key.trim(), value)?;
    }
    Ok(map)
}

/// Removes `keys` from `map` into a separate object.
pub fn split_off(map: &mut Map<String, Value>, keys: &[&str]) -> Map<String, Value> {
    keys.iter().filter_map(|k| map.remove(*k).map(|v| (k.to_string(), v))).collect()
}

pub fn parse<T: DeserializeOwned>(map: Map<String, Value>) -> anyhow::Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| usage(format!("invalid option: {e}")))
}
