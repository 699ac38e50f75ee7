//! Experiment configuration: `key = value` files, JSON, and flag overrides.
//!
//! Keys are the field names of [`FederationConfig`]. Precedence is flags over
//! file over defaults. A JSON file may be either a bare config object or a
//! `summary.json` written by `run`, in which case its `config` entry is used.

use std::path::Path;

use fedpr::federation::{FederationConfig, Strategy};
use fedpr::{Error, Result};
use serde_json::{Map, Value};

/// Resolves a configuration from an optional file and `(key, value)` overrides.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<FederationConfig> {
    let mut fields = default_fields();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value) in file_entries(&text, path)? {
            set_field(&mut fields, &key, value)?;
        }
    }
    for (key, raw) in overrides {
        let value = text_value(&fields, key, raw)?;
        set_field(&mut fields, key, value)?;
    }
    let mut cfg: FederationConfig =
        serde_json::from_value(Value::Object(fields)).map_err(|e| Error::Consistency(e.to_string()))?;
    resolve(&mut cfg)?;
    Ok(cfg)
}

/// FedAvg never uses the prototype term; FedPR without it is FedAvg in disguise.
fn resolve(cfg: &mut FederationConfig) -> Result<()> {
    match cfg.strategy {
        Strategy::FedAvg => cfg.lambda = 0.0,
        Strategy::FedPr if cfg.lambda == 0.0 => {
            return Err(Error::config("lambda", "fedpr requires lambda > 0; use strategy = fedavg"));
        }
        Strategy::FedPr => {}
    }
    cfg.validate()
}

fn default_fields() -> Map<String, Value> {
    match serde_json::to_value(FederationConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    }
}

fn file_entries(text: &str, path: &Path) -> Result<Vec<(String, Value)>> {
    if text.trim_start().starts_with('{') {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let obj = match root.get("config") {
            Some(Value::Object(inner)) => inner.clone(),
            _ => match root {
                Value::Object(m) => m,
                _ => unreachable!("starts with a brace"),
            },
        };
        return Ok(obj.into_iter().collect());
    }
    let defaults = default_fields();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, raw)) = line.split_once('=') else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: expected `key = value`", n + 1),
            });
        };
        let key = key.trim();
        out.push((key.to_string(), text_value(&defaults, key, raw.trim())?));
    }
    Ok(out)
}

/// Types a textual value after the field's default.
fn text_value(fields: &Map<String, Value>, key: &str, raw: &str) -> Result<Value> {
    let Some(default) = fields.get(key) else {
        return Err(Error::config(key, "unknown key"));
    };
    let bad = |what: &str| Error::config(key, format!("expected {what}, got `{raw}`"));
    Ok(match default {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::Number(_) => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Null if raw.is_empty() => Value::Null,
        _ => Value::String(raw.to_string()),
    })
}

fn set_field(fields: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    if !fields.contains_key(key) {
        return Err(Error::config(key, "unknown key"));
    }
    let previous = fields.insert(key.to_string(), value);
    if let Err(e) = serde_json::from_value::<FederationConfig>(Value::Object(fields.clone())) {
        fields.insert(key.to_string(), previous.unwrap_or(Value::Null));
        return Err(Error::config(key, e.to_string()));
    }
    Ok(())
}

/// The `key = value` form of a resolved configuration.
pub fn render_config(cfg: &FederationConfig) -> String {
    let Ok(Value::Object(fields)) = serde_json::to_value(cfg) else {
        unreachable!("config serializes to an object")
    };
    let mut out = String::new();
    for (key, value) in fields {
        let text = match value {
            Value::String(s) => s,
            Value::Null => String::new(),
            other => other.to_string(),
        };
        out.push_str(&format!("{key} = {text}\n"));
    }
    out
}
