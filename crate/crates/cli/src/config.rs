//! Layered configuration: preset, then TOML file, then `--set` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use fusionlab_core::simlab::{preset, SimConfig, PRESETS};
use toml::{Table, Value};

use crate::UsageError;

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

fn preset_table(name: &str) -> anyhow::Result<Table> {
    let cfg = preset(name).ok_or_else(|| {
        UsageError(anyhow!("unknown preset '{name}' (expected one of {})", PRESETS.join(", ")))
    })?;
    Ok(Table::try_from(cfg)?)
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    let doc = format!("v = {value}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(value.into())),
        Err(_) => Value::String(value.into()),
    }
}

/// Applies `section.key=value` to a table.
pub fn apply_override(table: &mut Table, assignment: &str) -> anyhow::Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError(anyhow!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(anyhow!("override key '{key}' is malformed")).into());
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(UsageError(anyhow!("override key '{key}': '{p}' is not a section")).into()),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Builds the effective configuration. Later layers win.
pub fn resolve(
    preset_name: Option<&str>,
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> anyhow::Result<SimConfig> {
    let mut table = match (preset_name, file) {
        (Some(name), _) => preset_table(name)?,
        (None, Some(_)) => Table::new(),
        (None, None) => preset_table("smoke")?,
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(UsageError)?;
        let parsed: Table = text
            .parse()
            .with_context(|| format!("cannot parse config {}", path.display()))
            .map_err(UsageError)?;
        merge(&mut table, parsed);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut table, &format!("experiment.seed={s}"))?;
    }
    let cfg: SimConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(anyhow!("invalid configuration: {}", e.message())))?;
    cfg.validate().map_err(|e| UsageError(e.into()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &SimConfig) -> anyhow::Result<String> {
    Ok(toml::to_string(cfg)?)
}

pub fn parse_selectors(list: &str) -> anyhow::Result<Vec<fusionlab_core::design::Method>> {
    let mut out = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let m = tok.parse().map_err(|e: fusionlab_core::Error| UsageError(e.into()))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!(UsageError(anyhow!("no selector given")));
    }
    Ok(out)
}
