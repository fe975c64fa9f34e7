//! Flat `key = value` run configuration covering every training and dataset
//! parameter.
//!
//! Keys are the field names of `TrainConfig` and `DatasetSpec`, except that
//! the dataset seed is `data_seed` and detector fields carry a `detector_`
//! prefix. `labeled_fraction` and `partition_seed` control the split written
//! by `gen-data`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pseudoweight_core::synthdata::DatasetSpec;
use pseudoweight_core::trainer::TrainConfig;
use serde_json::{Map, Value};

pub const DEFAULT_LABELED_FRACTION: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub labeled_fraction: f64,
    pub partition_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            labeled_fraction: DEFAULT_LABELED_FRACTION,
            partition_seed: 0,
        }
    }
}

enum Section {
    Train,
    Detector,
    Data,
    Run,
}

fn to_object(v: serde_json::Result<Value>) -> Map<String, Value> {
    match v.expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    fn entries(&self) -> Vec<(String, Section, String, Value)> {
        let mut out = Vec::new();
        let mut train = to_object(serde_json::to_value(&self.train));
        let detector = train.remove("detector").expect("detector field");
        for (k, v) in train {
            out.push((k.clone(), Section::Train, k, v));
        }
        if let Value::Object(d) = detector {
            for (k, v) in d {
                out.push((format!("detector_{k}"), Section::Detector, k, v));
            }
        }
        for (k, v) in to_object(serde_json::to_value(&self.data)) {
            let key = if k == "seed" {
                "data_seed".to_string()
            } else {
                k.clone()
            };
            out.push((key, Section::Data, k, v));
        }
        out.push((
            "labeled_fraction".into(),
            Section::Run,
            String::new(),
            self.labeled_fraction.into(),
        ));
        out.push((
            "partition_seed".into(),
            Section::Run,
            String::new(),
            self.partition_seed.into(),
        ));
        out
    }

    #[cfg(test)]
    pub fn keys() -> Vec<String> {
        RunConfig::default().entries().into_iter().map(|e| e.0).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let defaults = RunConfig::default().entries();
        let mut train = to_object(serde_json::to_value(TrainConfig::default()));
        let mut detector = match train.remove("detector") {
            Some(Value::Object(d)) => d,
            _ => unreachable!("detector is an object"),
        };
        let mut data = to_object(serde_json::to_value(DatasetSpec::default()));
        let mut run = RunConfig::default();
        let mut seen = BTreeSet::new();

        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = n + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {lineno}: expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let Some((_, section, field, default)) = defaults.iter().find(|e| e.0 == key) else {
                bail!("line {lineno}: unknown key '{key}'");
            };
            if !seen.insert(key.to_string()) {
                bail!("line {lineno}: duplicate key '{key}'");
            }
            let parsed = parse_like(default, value).with_context(|| format!("line {lineno}: {key}"))?;
            match section {
                Section::Train => {
                    train.insert(field.clone(), parsed);
                }
                Section::Detector => {
                    detector.insert(field.clone(), parsed);
                }
                Section::Data => {
                    data.insert(field.clone(), parsed);
                }
                Section::Run => match key {
                    "labeled_fraction" => run.labeled_fraction = parsed.as_f64().expect("number"),
                    _ => run.partition_seed = parsed.as_u64().expect("integer"),
                },
            }
        }
        train.insert("detector".into(), Value::Object(detector));
        run.train = serde_json::from_value(Value::Object(train)).context("training parameters")?;
        run.data = serde_json::from_value(Value::Object(data)).context("dataset parameters")?;
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            bail!("labeled_fraction must be in (0, 1], got {}", self.labeled_fraction);
        }
        Ok(())
    }

    /// Canonical file text: every key, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, _, _, value) in self.entries() {
            let _ = writeln!(s, "{key} = {}", format_value(&value));
        }
        s
    }
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(format_value).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parse `text` as a value of the same JSON type as `default`.
fn parse_like(default: &Value, text: &str) -> Result<Value> {
    Ok(match default {
        Value::Bool(_) => Value::Bool(
            text.parse()
                .map_err(|_| anyhow!("expected true or false, got '{text}'"))?,
        ),
        Value::Number(n) if n.is_u64() => Value::from(
            text.parse::<u64>()
                .map_err(|_| anyhow!("expected a non-negative integer, got '{text}'"))?,
        ),
        Value::Number(_) => {
            let x: f64 = text.parse().map_err(|_| anyhow!("expected a number, got '{text}'"))?;
            if !x.is_finite() {
                bail!("expected a finite number, got '{text}'");
            }
            Value::from(x)
        }
        Value::String(_) => Value::String(text.to_string()),
        Value::Array(_) => Value::Array(
            text.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<u64>()
                        .map(Value::from)
                        .map_err(|_| anyhow!("expected a comma-separated integer list, got '{text}'"))
                })
                .collect::<Result<_>>()?,
        ),
        other => bail!("unsupported value type {other}"),
    })
}

/// `--help` text listing every key and its default.
pub fn defaults_help() -> String {
    let mut s = String::from(
        "Config file: UTF-8 `key = value` lines, `#` starts a comment, unknown keys are rejected.\n\
         Keys and defaults:\n",
    );
    for line in RunConfig::default().to_text().lines() {
        let _ = writeln!(s, "  {line}");
    }
    s
}
