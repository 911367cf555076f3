//! Deterministic report files: CSV tables plus a JSON run manifest echoing
//! the resolved configuration.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Resolved;

/// An in-memory CSV table written byte-for-byte identically for identical
/// inputs.
pub struct Csv {
    name: &'static str,
    buf: String,
}

impl Csv {
    pub fn new(name: &'static str, header: &str) -> Csv {
        Csv {
            name,
            buf: format!("{header}\n"),
        }
    }

    pub fn row(&mut self, fields: std::fmt::Arguments<'_>) {
        self.buf.push_str(&fields.to_string());
        self.buf.push('\n');
    }

    pub fn bytes(&self) -> &[u8] {
        self.buf.as_bytes()
    }

    pub fn name(&self) -> &'static str {
        self.name
    }
}

#[macro_export]
macro_rules! csv_row {
    ($csv:expr, $($arg:tt)*) => {
        $csv.row(format_args!($($arg)*))
    };
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    experiment: &'a str,
    seed: u64,
    crate_version: &'static str,
    config: &'a Resolved,
}

/// Files produced by one experiment run.
pub struct RunOutputs {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

pub fn write_reports(
    resolved: &Resolved,
    out_dir: &Path,
    tables: &[Csv],
) -> std::io::Result<RunOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    for table in tables {
        let path = out_dir.join(table.name());
        let mut file = std::fs::File::create(&path)?;
        file.write_all(table.bytes())?;
        files.push(path);
    }
    let manifest = Manifest {
        schema_version: 1,
        experiment: &resolved.name,
        seed: resolved.seed,
        crate_version: env!("CARGO_PKG_VERSION"),
        config: resolved,
    };
    let path = out_dir.join("run_manifest.json");
    let mut file = std::fs::File::create(&path)?;
    file.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    file.write_all(b"\n")?;
    files.push(path);
    Ok(RunOutputs {
        dir: out_dir.to_path_buf(),
        files,
    })
}
