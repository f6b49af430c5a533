//! Run configuration: a TOML file plus `--set key.path=value` overrides.

use std::fs;
use std::path::Path;

use facemark_core::config::ModelConfig;
use facemark_core::training::{Phase, TrainConfig};
use facemark_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Either a preset name (`"desk"`, `"full"`) or a full model table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Full(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Preset(p) if p == "desk" => ModelConfig::desk(),
            ModelSpec::Preset(p) if p == "full" => ModelConfig::full(),
            ModelSpec::Preset(p) => {
                return Err(Error::Config(format!(
                    "unknown model preset `{p}` (expected desk or full)"
                )))
            }
            ModelSpec::Full(c) => c.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("override key `{key}` is empty")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `key.path=value`; the value is read as TOML, falling back to a string.
fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` should look like key=value")))?;
    let value = toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Loads `path` (if any) and applies `overrides`. Training fields not given
/// default to the preset of the chosen phase.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Missing(format!("config {}: {e}", p.display())))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut table, &k, v)?;
    }
    let bad = |e: toml::de::Error| Error::Config(e.to_string());
    let model = match table.remove("model") {
        Some(v) => v.try_into().map_err(bad)?,
        None => ModelSpec::Preset("desk".into()),
    };
    let user = match table.remove("train") {
        Some(Value::Table(t)) => t,
        Some(_) => return Err(Error::Config("`train` must be a table".into())),
        None => Table::new(),
    };
    if let Some(k) = table.keys().next() {
        return Err(Error::Config(format!(
            "unknown config key `{k}` (expected model, train)"
        )));
    }
    let phase: Phase = match user.get("phase") {
        Some(v) => v.clone().try_into().map_err(bad)?,
        None => Phase::Joint,
    };
    let mut base =
        Table::try_from(TrainConfig::for_phase(phase)).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, user);
    let train: TrainConfig = Value::Table(base).try_into().map_err(bad)?;
    train.validate()?;
    Ok(RunConfig { model, train })
}
