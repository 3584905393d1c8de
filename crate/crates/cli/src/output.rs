//! CSV tables and their JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values of column `name` parsed as numbers (`NaN` when unparsable).
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        let Some(c) = self.column(name) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .map(|r| r[c].parse().unwrap_or(f64::NAN))
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }
}

pub fn num(v: f64) -> String {
    v.to_string()
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.config.json` holding the
/// resolved configuration. Returns the CSV path.
pub fn write_table(
    dir: &Path,
    name: &str,
    table: &Table,
    cfg: &ExperimentConfig,
) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.csv"));
    let bytes = table.to_csv().map_err(std::io::Error::other)?;
    fs::write(&path, bytes)?;
    fs::write(dir.join(format!("{name}.config.json")), cfg.canonical_json() + "\n")?;
    Ok(path)
}

pub fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}
