use std::fmt;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CotError, Result};

use super::config::{ExperimentConfig, SCHEMA_VERSION};

/// One CSV cell. Floats print in Rust's shortest round-trip form, always
/// with a decimal point or exponent so they read back as floats.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Empty,
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Empty => Ok(()),
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Text(if v { "true" } else { "false" }.into())
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Inverse of `Display` for a field read back from CSV.
    fn parse(field: &str) -> Self {
        if field.is_empty() {
            Value::Empty
        } else if let Ok(i) = field.parse::<i64>() {
            Value::Int(i)
        } else if let Ok(v) = field.parse::<f64>() {
            Value::Float(v)
        } else {
            Value::Text(field.to_string())
        }
    }
}

/// A table with a fixed column order.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Report {
    pub fn new(experiment: &str, header: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(
            row.len(),
            self.header.len(),
            "row width must match the header"
        );
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Rows whose `column` holds the text `value`.
    pub fn rows_where<'a>(
        &'a self,
        column: &str,
        value: &'a str,
    ) -> impl Iterator<Item = &'a Vec<Value>> + 'a {
        let c = self.column(column);
        self.rows
            .iter()
            .filter(move |r| c.map(|c| r[c].as_str() == Some(value)).unwrap_or(false))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CotError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn from_csv(experiment: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(Value::parse).collect());
        }
        Ok(Self {
            experiment: experiment.to_string(),
            header,
            rows,
        })
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    schema_version: u32,
    experiment: &'a str,
    crate_name: &'a str,
    crate_version: &'a str,
    config_sha256: String,
    config: &'a ExperimentConfig,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.canonical_json().as_bytes()))
}

/// Metadata without timestamps, so reruns produce identical bytes.
pub fn meta_json(cfg: &ExperimentConfig) -> Result<String> {
    let meta = Meta {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment.tag(),
        crate_name: env!("CARGO_PKG_NAME"),
        crate_version: env!("CARGO_PKG_VERSION"),
        config_sha256: config_hash(cfg),
        config: cfg,
    };
    Ok(serde_json::to_string_pretty(&meta)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Experiment;

    fn sample() -> Report {
        let mut r = Report::new("t", &["experiment", "m", "value", "note"]);
        r.push(vec![
            "t".into(),
            100usize.into(),
            0.1f64.into(),
            Value::Empty,
        ]);
        r.push(vec![
            "t".into(),
            800usize.into(),
            (1.0f64 / 3.0).into(),
            "x,y".into(),
        ]);
        r
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let text = r.to_csv_string().unwrap();
        assert!(text.starts_with("experiment,m,value,note\n"));
        assert!(text.contains("\"x,y\""));
        let back = Report::from_csv("t", &text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.rows[1][2].as_f64().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn meta_is_stable_and_hash_tracks_config() {
        let a = ExperimentConfig::defaults_for(Experiment::Converge);
        assert_eq!(meta_json(&a).unwrap(), meta_json(&a.clone()).unwrap());
        let mut b = a.clone();
        b.cot.epochs += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
