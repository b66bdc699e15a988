//! JSON config files with `--set key.path=value` overrides.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

fn read(path: &Path) -> Result<Value, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !v.is_object() {
        return Err(UsageError(format!("config {} must be a JSON object", path.display())));
    }
    Ok(v)
}

/// `true`, numbers, arrays and objects parse as JSON; anything else is a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), UsageError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("bad override key {path:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| UsageError(format!("override {path:?}: {p:?} is not inside an object")))?;
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| UsageError(format!("override {path:?} does not name an object field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Config file (or `{}`), then every `key=value` override in order.
/// Unknown keys fail here, before anything is written.
pub fn load<T: DeserializeOwned>(file: Option<&Path>, sets: &[String]) -> Result<T, UsageError> {
    let mut v = match file {
        Some(p) => read(p)?,
        None => Value::Object(Map::new()),
    };
    for s in sets {
        let (k, raw) = s
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override {s:?} is not key=value")))?;
        set_path(&mut v, k.trim(), parse_value(raw))?;
    }
    serde_json::from_value(v).map_err(|e| UsageError(format!("invalid config: {e}")))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Every key of `T` with its default value, one per line.
pub fn key_listing<T: Serialize + Default>(notes: &str) -> String {
    let v = serde_json::to_value(T::default()).expect("defaults serialize");
    let mut keys = Vec::new();
    flatten("", &v, &mut keys);
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (JSON file via --config, or --set key=value; flags win):\n");
    for (k, d) in keys {
        let _ = writeln!(s, "  {k:width$}  default {d}");
    }
    s.push_str(notes);
    s
}
