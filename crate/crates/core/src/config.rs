//! Experiment configuration files: TOML sections of `key = value` pairs,
//! with `section.key=value` overrides applied on top.

use std::path::Path;

use thiserror::Error;
use toml::{Table, Value};

use crate::pipeline::ExperimentConfig;

/// File name of the resolved configuration written next to run outputs.
pub const SNAPSHOT_NAME: &str = "resolved-config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("override key `{key}`: `{segment}` is not a section")]
    NotASection { key: String, segment: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies one `a.b.c=value` override to `table`, creating sections as needed.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for seg in &parts[..parts.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError::NotASection {
                    key: key.into(),
                    segment: seg.to_string(),
                })
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Defaults, then the file (if any), then overrides in order.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            text.parse::<Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Value::Table(table)
        .try_into::<ExperimentConfig>()
        .map_err(|e| ConfigError::Parse(e.to_string()))
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// Writes [`SNAPSHOT_NAME`] into `dir`.
pub fn write_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let path = dir.join(SNAPSHOT_NAME);
    std::fs::write(&path, to_toml(cfg)).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_parse_types() {
        let cfg = resolve(
            None,
            &[
                "train.epochs=3".into(),
                "train.lr=0.002".into(),
                "decode.guidance.lambda=0.4".into(),
                "data.seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!(cfg.decode.guidance.unwrap().lambda, 0.4);
        assert_eq!(cfg.data.seed, 9);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.d = 32;
        let text = to_toml(&cfg);
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn malformed_override_rejected() {
        assert!(matches!(resolve(None, &["train.epochs".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(resolve(None, &["train.epochs=3".into(), "train.epochs.x=1".into()]), Err(ConfigError::NotASection { .. })));
        assert!(matches!(resolve(None, &["train.epochs=\"many\"".into()]), Err(ConfigError::Parse(_))));
    }
}
