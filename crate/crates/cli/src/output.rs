//! Result documents: the effective settings and their content hash travel
//! with every output. Nothing time-dependent is written.

use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct Document<'a, S: Serialize, R: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub config: &'a S,
    pub config_hash: String,
    #[serde(flatten)]
    pub result: R,
}

impl<'a, S: Serialize, R: Serialize> Document<'a, S, R> {
    pub fn new(command: &'static str, settings: &'a S, result: R) -> Result<Self, CliError> {
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config: settings,
            config_hash: settings_hash(settings)?,
            result,
        })
    }
}

/// Hash of the settings JSON framed like a git blob (`blob <len>\0<bytes>`).
pub fn settings_hash<S: Serialize>(settings: &S) -> Result<String, CliError> {
    let body = serde_json::to_vec(settings).map_err(hrl_core::Error::from)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(hrl_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(hrl_core::Error::from)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::output(path, e))
}

/// `runs/cov.csv` -> `runs/cov.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Write a result either as the full JSON document or as a CSV table plus a
/// `.meta.json` sidecar holding the document without the table. Without a
/// path the chosen rendering goes to stdout.
pub fn emit<S: Serialize, R: Serialize, T: Serialize>(
    doc: &Document<'_, S, R>,
    table: &[T],
    csv: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let text = if csv { csv_string(table)? } else { json_string(doc)? };
    match out {
        Some(path) => {
            write_text(path, &text)?;
            if csv {
                write_text(&sidecar(path, "meta.json"), &json_string(doc)?)?;
            }
        }
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| CliError::output("<stdout>", e))?;
        }
    }
    Ok(())
}

/// JSONL file flushed after every record, so an interrupted run leaves only
/// complete lines behind.
pub struct TraceWriter {
    path: PathBuf,
    inner: LineWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::output(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: LineWriter::new(file),
        })
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let mut line = serde_json::to_vec(value).map_err(hrl_core::Error::from)?;
        line.push(b'\n');
        self.inner
            .write_all(&line)
            .and_then(|_| self.inner.flush())
            .map_err(|e| CliError::output(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct S {
        a: u32,
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let h1 = settings_hash(&S { a: 1 }).unwrap();
        assert_eq!(h1, settings_hash(&S { a: 1 }).unwrap());
        assert_ne!(h1, settings_hash(&S { a: 2 }).unwrap());
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn sidecar_replaces_the_extension() {
        assert_eq!(sidecar(Path::new("d/cov.csv"), "meta.json"), PathBuf::from("d/cov.meta.json"));
        assert_eq!(sidecar(Path::new("sim"), "membership.csv"), PathBuf::from("sim.membership.csv"));
    }

    #[test]
    fn trace_lines_are_complete_after_each_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut w = TraceWriter::create(&path).unwrap();
        w.record(&S { a: 1 }).unwrap();
        // readable before the writer is dropped
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"a\":1}\n");
        w.record(&S { a: 2 }).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }
}
