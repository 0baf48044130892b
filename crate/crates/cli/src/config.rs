//! TOML configs with dotted `key=value` overrides; unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{CliError, Result};

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` has an empty segment")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// Reads `path` (defaults if absent), applies overrides in order and
/// deserializes strictly.
pub fn resolve<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::MissingInput(p.to_path_buf()));
            }
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| CliError::Config(format!("cannot render config: {e}")))
}
