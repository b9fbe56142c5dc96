//! JSON and CSV report files.

use std::path::Path;

use knnproxy_core::{Error, Result};
use serde::Serialize;

fn format_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_error(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| format_error(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_error(path, e))?;
    }
    w.flush().map_err(|e| format_error(path, e))
}
