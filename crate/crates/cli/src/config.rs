//! Config file loading with dotted `key=value` overrides.

use std::path::Path;

use serde_json::{Map, Value};
use ssp_core::pipeline::RunConfig;
use ssp_core::{Error, Result};

/// Reads TOML, or JSON when the extension is `.json`.
pub fn read_tree(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::to_value(table)?)
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Result<Value> {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => Ok(serde_json::to_value(t.remove("v").expect("key v was just parsed"))?),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = parse_value(raw.trim())?;
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override {key:?} descends into a non-table")));
        }
        node = node
            .as_object_mut()
            .expect("checked object")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => read_tree(p)?,
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut tree, &format!("seed={seed}"))?;
    }
    if tree.get("task").is_none() {
        return Err(Error::Config(
            "no task configured; set [task] preset in the config file or pass --set task.preset=ner|pos|nli".into(),
        ));
    }
    let config: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
