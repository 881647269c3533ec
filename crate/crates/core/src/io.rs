//! File helpers shared by every writer in the crate.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Minimal CSV accumulator. Floats are printed with a fixed precision so
/// that repeated runs produce byte-identical files.
#[derive(Debug, Clone, Default)]
pub struct CsvTable {
    buf: String,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self { buf }
    }

    pub fn push_row(&mut self, values: &[f64]) {
        let row: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.buf.push_str(&row.join(","));
        self.buf.push('\n');
    }

    /// Row with a leading free-form text cell (e.g. a mode tag).
    pub fn push_tagged_row(&mut self, tag: &str, values: &[f64]) {
        self.buf.push_str(tag);
        for v in values {
            self.buf.push(',');
            self.buf.push_str(&fmt_f64(*v));
        }
        self.buf.push('\n');
    }

    /// Continue an existing CSV text if its header matches.
    pub fn resume(text: &str, header: &[&str]) -> Option<Self> {
        let first = text.lines().next()?;
        if first != header.join(",") {
            return None;
        }
        let mut buf = text.to_string();
        if !buf.ends_with('\n') {
            buf.push('\n');
        }
        Some(Self { buf })
    }

    pub fn rows(&self) -> usize {
        self.buf.lines().count().saturating_sub(1)
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.buf.as_bytes())
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.9e}")
    }
}
