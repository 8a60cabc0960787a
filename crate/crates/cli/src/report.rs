use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// Machine-readable command output. Object keys serialize in sorted order, so
/// equal reports are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub inputs: Value,
    pub results: Value,
}

impl Report {
    pub fn new(command: &str, inputs: impl Serialize, results: impl Serialize) -> anyhow::Result<Self> {
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            inputs: serde_json::to_value(inputs)?,
            results: serde_json::to_value(results)?,
        })
    }

    pub fn to_json(&self) -> String {
        // round trip through Value so every nested map is sorted
        let v = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }

    /// Writes to `path`, or to stdout when no path is given.
    pub fn emit(&self, path: Option<&Path>) -> anyhow::Result<()> {
        match path {
            Some(p) => std::fs::write(p, self.to_json()).with_context(|| format!("writing report {}", p.display())),
            None => {
                print!("{}", self.to_json());
                Ok(())
            }
        }
    }
}
