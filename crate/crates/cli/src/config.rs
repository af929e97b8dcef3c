//! Flag > environment > JSON-file option layering.
//!
//! Each tunable resolves through three layers: an explicit command-line flag
//! wins, then an `SGDA_<KEY>` environment variable, then a key in the JSON
//! object passed via `--config`. Paths are never layered. The effective
//! configuration of a run is echoed to `config.resolved.json`; its `options`
//! object is accepted back by `--config`, so the echo reproduces the run.

use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sgda_core::{Error, Result};

pub struct Layers {
    source: String,
    json: Map<String, Value>,
}

impl Layers {
    /// Loads the JSON layer. The file must hold an object; an echoed
    /// `config.resolved.json` is recognized by its `options` member.
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let (source, json) = match config {
            None => ("--config".to_string(), Map::new()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Io(std::io::Error::new(
                        e.kind(),
                        format!("{}: {e}", path.display()),
                    ))
                })?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                let mut map = value.as_object().cloned().ok_or_else(|| {
                    Error::config(format!(
                        "{}: top level must be a JSON object",
                        path.display()
                    ))
                })?;
                if let Some(inner) = map.get("options") {
                    map = inner.as_object().cloned().ok_or_else(|| {
                        Error::config(format!(
                            "{}: `options` must be a JSON object",
                            path.display()
                        ))
                    })?;
                }
                (path.display().to_string(), map)
            }
        };
        Ok(Layers { source, json })
    }

    /// Rejects JSON keys outside the command's option set, so typos fail
    /// loudly instead of being ignored.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.json.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::config(format!(
                    "{}: unknown option `{key}` (expected one of: {})",
                    self.source,
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// The `SGDA_<KEY>` environment layer; an empty value counts as unset.
    pub fn env(key: &str) -> Option<String> {
        std::env::var(format!("SGDA_{}", key.to_uppercase()))
            .ok()
            .filter(|s| !s.is_empty())
    }

    /// Raw JSON-layer value, for options whose shape no flag can express.
    pub fn json_value(&self, key: &str) -> Option<&Value> {
        self.json.get(key)
    }

    /// Resolves one option: flag > `SGDA_<KEY>` > JSON `key` > `default`.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + DeserializeOwned,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(raw) = Self::env(key) {
            return raw.parse::<T>().map_err(|_| {
                Error::config(format!(
                    "environment variable SGDA_{}: cannot parse `{raw}`",
                    key.to_uppercase()
                ))
            });
        }
        if let Some(v) = self.json.get(key) {
            return self.from_json(key, v);
        }
        Ok(default)
    }

    /// Like [`Layers::resolve`] but with no default: a missing value is a
    /// usage error naming every layer that could supply it.
    pub fn resolve_required<T>(&self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + DeserializeOwned,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(raw) = Self::env(key) {
            return raw.parse::<T>().map_err(|_| {
                Error::config(format!(
                    "environment variable SGDA_{}: cannot parse `{raw}`",
                    key.to_uppercase()
                ))
            });
        }
        if let Some(v) = self.json.get(key) {
            return self.from_json(key, v);
        }
        Err(Error::usage(format!(
            "missing required option `{key}` (--{}, SGDA_{}, or a config key)",
            key.replace('_', "-"),
            key.to_uppercase()
        )))
    }

    /// Like [`Layers::resolve`] for list options: comma-separated in flags
    /// and the environment, an array (or the same string) in JSON.
    pub fn resolve_list(
        &self,
        key: &str,
        flag: Option<String>,
        default: &[usize],
    ) -> Result<Vec<usize>> {
        let parse_csv = |raw: &str, origin: &str| -> Result<Vec<usize>> {
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>().map_err(|_| {
                        Error::config(format!("{origin}: `{s}` in `{raw}` is not a count"))
                    })
                })
                .collect()
        };
        if let Some(raw) = flag {
            return parse_csv(&raw, &format!("--{}", key.replace('_', "-")));
        }
        if let Some(raw) = Self::env(key) {
            return parse_csv(
                &raw,
                &format!("environment variable SGDA_{}", key.to_uppercase()),
            );
        }
        match self.json.get(key) {
            Some(Value::String(s)) => parse_csv(s, &self.source),
            Some(v) => self.from_json(key, v),
            None => Ok(default.to_vec()),
        }
    }

    fn from_json<T: DeserializeOwned>(&self, key: &str, v: &Value) -> Result<T> {
        serde_json::from_value(v.clone())
            .map_err(|e| Error::config(format!("{}: option `{key}`: {e}", self.source)))
    }
}

/// Echo payload: the command name, its paths, and the layered options.
#[derive(Serialize)]
pub struct Resolved<T: Serialize> {
    pub command: &'static str,
    pub paths: Map<String, Value>,
    pub options: T,
}

impl<T: Serialize> Resolved<T> {
    pub fn new(command: &'static str, paths: &[(&str, &Path)], options: T) -> Self {
        let paths = paths
            .iter()
            .map(|(k, p)| (k.to_string(), Value::String(p.display().to_string())))
            .collect();
        Resolved {
            command,
            paths,
            options,
        }
    }

    /// Writes `config.resolved.json` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join("config.resolved.json"), text)?;
        Ok(())
    }
}
