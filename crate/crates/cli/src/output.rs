//! Artifact writing: RFC-4180 CSV tables, pretty JSON and the effective config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> CliResult<PathBuf> {
        let path = self.path(name);
        let io = |e: csv::Error| CliError::io(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(&path).map_err(io)?;
        w.write_record(&table.header).map_err(io)?;
        for row in &table.rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
        text.push('\n');
        self.text(name, &text)
    }

    pub fn text(&mut self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        self.written.push(path.clone());
        Ok(path)
    }
}

/// Header plus stringly rows, so every cell is formatted exactly once.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Shortest round-tripping representation; `inf` and `NaN` spelled out.
pub fn num(v: f64) -> String {
    format!("{v}")
}

/// `value(err)` with the error rounded to two significant digits.
pub fn with_err(v: f64, err: f64) -> String {
    if !v.is_finite() {
        return "unbounded".into();
    }
    if !err.is_finite() || err <= 0.0 {
        return format!("{}", sig(v, 4));
    }
    let digits = (-(err.log10().floor()) + 1.0).max(0.0) as usize;
    format!("{v:.digits$} ± {err:.digits$}")
}

fn sig(v: f64, n: i32) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(n - 1 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

/// File-name safe version of a scenario name.
pub fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_value_with_error() {
        assert_eq!(with_err(263.4, 16.2), "263 ± 16");
        assert_eq!(with_err(1.0234, 0.021), "1.023 ± 0.021");
        assert_eq!(with_err(f64::INFINITY, 1.0), "unbounded");
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("C2 echo/1"), "C2_echo_1");
    }

    #[test]
    fn csv_quotes_and_terminates_per_rfc() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(dir.path()).unwrap();
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "x,y".into()]);
        let p = out.csv("t.csv", &t).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "a,b\r\n1,\"x,y\"\r\n");
    }
}
