//! Run configuration: a TOML file, then `--set` overrides, then validation.

use std::fs;
use std::path::{Path, PathBuf};

use fsll_core::data::{generate_synthetic, load_delimited, DelimitedFormat};
use fsll_core::{ArchConfig, Dataset, Method, ModelConfig, ProtocolConfig, ScheduleSpec, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: String,
    /// Drives schedule sampling, initialization and shuffling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_method() -> String {
    Method::Fsll.name().to_string()
}

/// Exactly one source; synthetic defaults when neither is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<FileData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub path: PathBuf,
    pub test_per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_side: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string() + &span_hint(&e)))?;
        if config.data.file.is_none() && config.data.synthetic.is_none() {
            config.data.synthetic = Some(SyntheticSpec::default());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |section: &str, e: fsll_core::Error| CliError::Config(format!("[{section}] {e}"));
        self.method()?;
        match (&self.data.synthetic, &self.data.file) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "[data] set either data.synthetic or data.file, not both".into(),
                ))
            }
            (Some(s), None) => s.validate().map_err(|e| invalid("data.synthetic", e))?,
            _ => {}
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.schedule.base_classes == 0 || self.schedule.ways == 0 || self.schedule.shots == 0 {
            return Err(CliError::Config(
                "[schedule] base_classes, ways and shots must be >= 1".into(),
            ));
        }
        ModelConfig::new(1, self.model.hidden.clone(), self.model.feature_dim, 1)
            .validate()
            .map_err(|e| invalid("model", e))
    }

    pub fn method(&self) -> Result<Method> {
        Ok(self.method.parse::<Method>()?)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        self.data.synthetic.clone().unwrap_or_default()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(match &self.data.file {
            Some(f) => load_delimited(
                &f.path,
                &DelimitedFormat {
                    test_per_class: f.test_per_class,
                    grid_side: f.grid_side,
                },
            )?,
            None => generate_synthetic(&self.synthetic())?,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map_or_else(String::new, |s| format!(" (at {}..{})", s.start, s.end))
}

/// Sets a dotted key such as `train.lambda=3`; values parse as TOML, falling back to a string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = parse_value(raw.trim());

    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(format!(
                    "override {assignment:?}: {} is not a table",
                    path[..=depth].join(".")
                )))
            }
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Table {
        text.parse().unwrap()
    }

    #[test]
    fn overrides_parse_toml_values() {
        let mut t = Table::new();
        apply_override(&mut t, "train.lambda=3").unwrap();
        apply_override(&mut t, "train.cosine_loss=false").unwrap();
        apply_override(&mut t, "model.hidden=[8, 4]").unwrap();
        apply_override(&mut t, "method=FSLL+SS").unwrap();
        assert_eq!(t["train"]["lambda"], Value::Integer(3));
        assert_eq!(t["train"]["cosine_loss"], Value::Boolean(false));
        assert_eq!(t["model"]["hidden"], Value::Array(vec![Value::Integer(8), Value::Integer(4)]));
        assert_eq!(t["method"], Value::String("FSLL+SS".into()));
    }

    #[test]
    fn override_into_scalar_fails() {
        let mut t = table("seed = 1");
        assert!(apply_override(&mut t, "seed.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
    }

    #[test]
    fn integer_fills_float_field() {
        let mut t = Table::new();
        apply_override(&mut t, "train.lambda=3").unwrap();
        let c: RunConfig = t.try_into().unwrap();
        assert_eq!(c.train.lambda, 3.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let c: std::result::Result<RunConfig, _> = table("[train]\nlambada = 1").try_into();
        assert!(c.unwrap_err().to_string().contains("lambada"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut t = table("method = \"Frozen\"\nseed = 9\n[data.synthetic]\nnum_classes = 30\n");
        apply_override(&mut t, "train.session_lr=0.003").unwrap();
        let c: RunConfig = t.try_into().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn both_sources_rejected() {
        let c: RunConfig = table(
            "[data.synthetic]\nnum_classes = 30\n[data.file]\npath = \"x.csv\"\ntest_per_class = 2\n",
        )
        .try_into()
        .unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
