//! Artifact writing: JSON documents and CSV tables, each written to a
//! temporary file in the output directory and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::CliError;

/// Finite numbers as JSON numbers (shortest round-trip form); infinities as
/// the markers `"+inf"` / `"-inf"`, NaN as `"nan"`.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x.is_nan() {
        Value::from("nan")
    } else if x > 0.0 {
        Value::from("+inf")
    } else {
        Value::from("-inf")
    }
}

pub fn vector(v: &nalgebra::DVector<f64>) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

/// Row-major nested arrays.
pub fn matrix(m: &nalgebra::DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| Value::Array(m.row(i).iter().map(|&x| num(x)).collect())).collect())
}

/// A CSV cell with the same number formatting as the JSON artifacts.
pub fn cell(x: f64) -> String {
    match num(x) {
        Value::String(s) => s,
        v => v.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        Ok(OutputDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", self.path(name).display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(io)?;
        tmp.write_all(bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(self.path(name)).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
        text.push('\n');
        self.write_atomic(name, text.as_bytes())
    }

    pub fn write_csv<I>(&self, name: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.write_atomic(name, text.as_bytes())
    }
}

/// `prefix1, ..., prefixN`.
pub fn indexed(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}
