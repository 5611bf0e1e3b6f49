//! `key<TAB>value` reports with an optional JSON twin.

use std::path::Path;

use serde_json::{Map, Number, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ReportValue {
    Number(f64),
    Count(u64),
    Text(String),
}

impl std::fmt::Display for ReportValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReportValue::Number(v) => write!(f, "{v}"),
            ReportValue::Count(v) => write!(f, "{v}"),
            ReportValue::Text(s) => f.write_str(s),
        }
    }
}

/// Ordered key/value lines. Keys are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, ReportValue)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, key: impl Into<String>, value: ReportValue) {
        let key = key.into();
        debug_assert!(!key.contains(['\t', '\n']), "report key {key:?}");
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn number(&mut self, key: impl Into<String>, v: f64) {
        self.push(key, ReportValue::Number(v));
    }

    pub fn count(&mut self, key: impl Into<String>, v: usize) {
        self.push(key, ReportValue::Count(v as u64));
    }

    pub fn text(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.push(key, ReportValue::Text(v.into()));
    }

    pub fn get(&self, key: &str) -> Option<&ReportValue> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, ReportValue)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
    }

    /// JSON object with keys sorted; non-finite numbers become strings.
    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self
            .entries
            .iter()
            .map(|(k, v)| {
                let value = match v {
                    ReportValue::Number(x) => Number::from_f64(*x).map_or_else(|| Value::String(x.to_string()), Value::Number),
                    ReportValue::Count(n) => Value::from(*n),
                    ReportValue::Text(s) => Value::String(s.clone()),
                };
                (k.clone(), value)
            })
            .collect();
        let mut text = serde_json::to_string_pretty(&Value::Object(map)).expect("report serializes");
        text.push('\n');
        text
    }

    /// Writes the text report, replacing any existing file, and the JSON twin
    /// when asked.
    pub fn write(&self, path: &Path, json: Option<&Path>) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(CliError::io(path))?;
        if let Some(j) = json {
            std::fs::write(j, self.to_json()).map_err(CliError::io(j))?;
        }
        Ok(())
    }
}
