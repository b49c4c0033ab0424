//! Run configuration: defaults, then an optional JSON or TOML file, then
//! `a.b.c=value` overrides, last one winning.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use exemplar_seg::pipeline::PipelineConfig;
use serde_json::{Map, Value};

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        let v: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(serde_json::to_value(v)?)
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Parses `key.path=value`. The value is read as JSON when it parses,
/// otherwise taken as a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` is not key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        bail!("override `{s}` has an empty key segment");
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn apply(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let obj: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{}` is not a table", path[..i].join(".")))?;
        node = obj.get_mut(seg).ok_or_else(|| anyhow!("unknown config key `{}`", path[..=i].join(".")))?;
    }
    *node = value;
    Ok(())
}

pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default())?;
    if let Some(f) = file {
        let v = read_file(f)?;
        if !v.is_object() {
            bail!("{} must hold a table at the top level", f.display());
        }
        merge(&mut value, v);
    }
    for o in overrides {
        let (path, v) = parse_override(o)?;
        apply(&mut value, &path, v)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}
