//! Experiment configuration: INI-style `key = value` files with `[section]`
//! headers, checked against a per-command schema.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::error::CliError;

/// Environment variable that replaces `run.seed`.
pub const SEED_ENV: &str = "FLEXKERNEL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Required,
    /// May be left out; has no default.
    Optional,
    Default(&'static str),
}

/// One accepted key, written `section.key`.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub need: Need,
}

pub const fn key(name: &'static str, need: Need) -> KeySpec {
    KeySpec { name, need }
}

/// A parsed configuration with every schema default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>, schema: &[KeySpec]) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, schema)
    }

    /// Parses `text`, rejecting unknown, duplicated or missing keys, then
    /// applies the seed override from the environment.
    pub fn parse(text: &str, schema: &[KeySpec]) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(format!("syntax: {e}")))?;
        let mut values = BTreeMap::new();
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let name = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_owned(),
                };
                if !schema.iter().any(|s| s.name == name) {
                    return Err(CliError::Config(format!("unknown key {name}")));
                }
                if values.insert(name.clone(), v.trim().to_owned()).is_some() {
                    return Err(CliError::Config(format!("duplicate key {name}")));
                }
            }
        }
        for spec in schema {
            match spec.need {
                Need::Required if !values.contains_key(spec.name) => {
                    return Err(CliError::Config(format!("missing required key {}", spec.name)));
                }
                Need::Default(d) => {
                    values.entry(spec.name.to_owned()).or_insert_with(|| d.to_owned());
                }
                _ => {}
            }
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            if schema.iter().any(|s| s.name == "run.seed") {
                seed.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {seed:?}")))?;
                values.insert("run.seed".to_owned(), seed.trim().to_owned());
            }
        }
        Ok(ExperimentConfig { values })
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    pub fn get<V: FromStr>(&self, name: &str) -> Result<V, CliError> {
        self.opt(name)?
            .ok_or_else(|| CliError::Config(format!("missing key {name}")))
    }

    pub fn opt<V: FromStr>(&self, name: &str) -> Result<Option<V>, CliError> {
        match self.raw(name) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("bad value for {name}: {raw:?}"))),
        }
    }

    /// Comma-separated list.
    pub fn list<V: FromStr>(&self, name: &str) -> Result<Vec<V>, CliError> {
        let raw = self.raw(name).unwrap_or("");
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("bad list entry for {name}: {s:?}")))
            })
            .collect()
    }

    /// Resolved `section.key = value` lines in key order.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}
