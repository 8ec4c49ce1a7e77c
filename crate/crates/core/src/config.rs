//! Run configuration: TOML file, command-line overrides and defaults,
//! resolved in that order of increasing precedence.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::synthdata::{case_preset, ScenarioConfig};

/// Everything a run needs. The top-level `seed` drives both the scenario
/// generator and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Trailing share of a generated series written as the test split.
    pub test_fraction: f64,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            test_fraction: 0.3,
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(case) = self.scenario.case_preset {
            case_preset(case)?;
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.scenario.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }
}

/// Keys that exist in the nested structs but are owned by another key;
/// they may only repeat the owner's value.
const DERIVED_KEYS: [(&str, &str); 2] = [("train.seed", "seed"), ("scenario.seed", "seed")];

/// Merges `overrides` (dotted key, value) over the TOML `file` text over
/// the defaults. Scenario defaults come from the selected case preset.
pub fn resolve_config(file: Option<&str>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut user = match file {
        Some(text) => text
            .parse::<Table>()
            .map_err(|e| Error::InvalidConfig(format!("config does not parse: {}", e.message())))?,
        None => Table::new(),
    };
    for (key, value) in overrides {
        set_dotted(&mut user, key, value.clone())?;
    }

    let case = match user.get("scenario").and_then(|s| s.get("case_preset")) {
        Some(Value::Integer(c)) => u8::try_from(*c)
            .map_err(|_| Error::InvalidConfig(format!("unknown case preset {c} (expected 1, 2 or 3)")))?,
        Some(_) => {
            return Err(Error::TypeMismatch {
                key: "scenario.case_preset".into(),
                expected: "an integer",
            })
        }
        None => 1,
    };
    let base = RunConfig {
        scenario: case_preset(case)?,
        ..RunConfig::default()
    };
    let Value::Table(mut merged) = Value::try_from(&base).map_err(|e| Error::InvalidConfig(e.to_string()))? else {
        unreachable!("a struct serializes to a table")
    };
    check_keys(&mut user, &merged, "")?;
    let derived: Vec<(&str, &str, Value)> = DERIVED_KEYS
        .iter()
        .filter_map(|&(key, owner)| lookup(&user, key).map(|v| (key, owner, v.clone())))
        .collect();
    merge(&mut merged, user);
    let seed = merged.get("seed").cloned();
    for (key, owner, value) in derived {
        if Some(&value) != seed.as_ref() {
            return Err(Error::InvalidConfig(format!("`{key}` must equal `{owner}`; set `{owner}` instead")));
        }
    }

    let mut config: RunConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
    config.scenario.seed = config.seed;
    config.train.seed = config.seed;
    config.validate()?;
    Ok(config)
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(Error::TypeMismatch {
                    key: parts[..=i].join("."),
                    expected: "a table",
                })
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for part in parts {
        cur = cur.as_table()?.get(part)?;
    }
    Some(cur)
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Rejects keys absent from `schema` and values of the wrong kind. Integers
/// given for float fields are widened in place.
fn check_keys(user: &mut Table, schema: &Table, prefix: &str) -> Result<()> {
    for (key, value) in user.iter_mut() {
        let path = join(prefix, key);
        let Some(expected) = schema.get(key) else {
            return Err(Error::UnknownKey {
                suggestion: suggest(key, schema, prefix),
                key: path,
            });
        };
        check_value(value, expected, &path)?;
    }
    Ok(())
}

fn check_value(value: &mut Value, expected: &Value, path: &str) -> Result<()> {
    let mismatch = |expected: &'static str| Error::TypeMismatch {
        key: path.to_string(),
        expected,
    };
    match (expected, &mut *value) {
        (Value::Table(schema), Value::Table(user)) => check_keys(user, schema, path),
        (Value::Table(_), _) => Err(mismatch("a table")),
        (Value::Float(_), Value::Integer(i)) => {
            *value = Value::Float(*i as f64);
            Ok(())
        }
        (Value::Float(_), Value::Float(_)) => Ok(()),
        (Value::Float(_), _) => Err(mismatch("a number")),
        (Value::Integer(_), Value::Integer(i)) if *i >= 0 => Ok(()),
        (Value::Integer(_), _) => Err(mismatch("a non-negative integer")),
        (Value::Boolean(_), Value::Boolean(_)) => Ok(()),
        (Value::Boolean(_), _) => Err(mismatch("a boolean")),
        (Value::String(_), Value::String(_)) => Ok(()),
        (Value::String(_), _) => Err(mismatch("a string")),
        (Value::Array(schema), Value::Array(user)) => {
            if schema.len() != user.len() {
                return Err(mismatch("a two-element array"));
            }
            for (i, (u, s)) in user.iter_mut().zip(schema).enumerate() {
                check_value(u, s, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        (Value::Array(_), _) => Err(mismatch("an array")),
        _ => Ok(()),
    }
}

/// Closest sibling key, or the full path of an identically named key in
/// another section.
fn suggest(key: &str, schema: &Table, prefix: &str) -> Option<String> {
    let best = schema
        .keys()
        .map(|k| (strsim::damerau_levenshtein(key, k), k))
        .min_by_key(|(d, _)| *d)
        .filter(|(d, _)| *d <= 2.max(key.len() / 3));
    if let Some((_, k)) = best {
        return Some(k.clone());
    }
    let mut found = None;
    find_leaf(key, schema, prefix, &mut found);
    found
}

fn find_leaf(key: &str, table: &Table, prefix: &str, found: &mut Option<String>) {
    for (k, v) in table {
        if found.is_some() {
            return;
        }
        let path = join(prefix, k);
        if k == key {
            *found = Some(path);
        } else if let Value::Table(t) = v {
            find_leaf(key, t, &path, found);
        }
    }
}

fn merge(base: &mut Table, user: Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
