//! Line-delimited artifact files: one `meta` header line, `entry` lines,
//! and a closing `summary` line carrying a checksum of the entry lines.
//!
//! A file without its summary line is a valid partial artifact; readers
//! return the entries present and report it as incomplete.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Deserialize)]
struct KindOnly {
    kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trailer<S> {
    #[serde(flatten)]
    pub summary: S,
    pub entries: usize,
    pub entries_checksum: String,
}

pub struct JsonlWriter {
    out: BufWriter<File>,
    path: String,
    hasher: Sha256,
    entries: usize,
}

impl JsonlWriter {
    pub fn create<M: Serialize>(path: &Path, meta: &M) -> Result<Self, JsonlError> {
        let io = |source| JsonlError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        let mut writer = Self {
            out: BufWriter::new(file),
            path: path.display().to_string(),
            hasher: Sha256::new(),
            entries: 0,
        };
        writer.write_line(&Tagged {
            kind: "meta",
            body: meta,
        })?;
        writer.flush()?;
        Ok(writer)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<Vec<u8>, JsonlError> {
        let mut line = serde_json::to_vec(value).expect("record serializes");
        line.push(b'\n');
        self.out.write_all(&line).map_err(|source| JsonlError::Io {
            path: self.path.clone(),
            source,
        })?;
        Ok(line)
    }

    pub fn flush(&mut self) -> Result<(), JsonlError> {
        self.out.flush().map_err(|source| JsonlError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn entry<E: Serialize>(&mut self, entry: &E) -> Result<(), JsonlError> {
        let line = self.write_line(&Tagged {
            kind: "entry",
            body: entry,
        })?;
        self.hasher.update(&line);
        self.entries += 1;
        Ok(())
    }

    pub fn finish<S: Serialize>(mut self, summary: S) -> Result<(), JsonlError> {
        let trailer = Trailer {
            summary,
            entries: self.entries,
            entries_checksum: hex::encode(self.hasher.clone().finalize()),
        };
        self.write_line(&Tagged {
            kind: "summary",
            body: &trailer,
        })?;
        self.flush()
    }
}

#[derive(Debug)]
pub struct JsonlContents<M, E, S> {
    pub meta: M,
    pub entries: Vec<E>,
    pub trailer: Option<Trailer<S>>,
}

impl<M, E, S> JsonlContents<M, E, S> {
    pub fn is_complete(&self) -> bool {
        self.trailer.is_some()
    }
}

pub fn read_jsonl<M, E, S>(path: &Path) -> Result<JsonlContents<M, E, S>, JsonlError>
where
    M: DeserializeOwned,
    E: DeserializeOwned,
    S: DeserializeOwned,
{
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: p.clone(),
        source,
    })?;
    let fmt = |line: usize, reason: String| JsonlError::Format {
        path: p.clone(),
        line,
        reason,
    };
    let mut meta = None;
    let mut entries = Vec::new();
    let mut trailer = None;
    let mut hasher = Sha256::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let n = idx + 1;
        let line = line.map_err(|source| JsonlError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if trailer.is_some() {
            return Err(fmt(n, "content after summary line".into()));
        }
        let kind: KindOnly = serde_json::from_str(&line).map_err(|e| fmt(n, e.to_string()))?;
        match kind.kind.as_str() {
            "meta" if meta.is_none() && n == 1 => {
                meta = Some(serde_json::from_str(&line).map_err(|e| fmt(n, e.to_string()))?);
            }
            "entry" if meta.is_some() => {
                entries.push(serde_json::from_str(&line).map_err(|e| fmt(n, e.to_string()))?);
                hasher.update(line.as_bytes());
                hasher.update(b"\n");
            }
            "summary" if meta.is_some() => {
                let t: Trailer<S> =
                    serde_json::from_str(&line).map_err(|e| fmt(n, e.to_string()))?;
                if t.entries != entries.len()
                    || t.entries_checksum != hex::encode(hasher.clone().finalize())
                {
                    return Err(fmt(n, "entry checksum mismatch".into()));
                }
                trailer = Some(t);
            }
            other => return Err(fmt(n, format!("unexpected record kind '{other}'"))),
        }
    }
    let meta = meta.ok_or_else(|| fmt(1, "missing meta header".into()))?;
    Ok(JsonlContents {
        meta,
        entries,
        trailer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut w = JsonlWriter::create(&path, &json!({"mode": "baseline"})).unwrap();
        w.entry(&json!({"case_id": "c1"})).unwrap();
        w.entry(&json!({"case_id": "c2"})).unwrap();
        w.finish(json!({"correct": 1})).unwrap();

        let c: JsonlContents<Value, Value, Value> = read_jsonl(&path).unwrap();
        assert_eq!(c.meta["mode"], "baseline");
        assert_eq!(c.entries.len(), 2);
        assert!(c.is_complete());
        assert_eq!(c.trailer.unwrap().summary["correct"], 1);
    }

    #[test]
    fn partial_file_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut w = JsonlWriter::create(&path, &json!({})).unwrap();
        w.entry(&json!({"case_id": "c1"})).unwrap();
        w.flush().unwrap();
        drop(w);
        let c: JsonlContents<Value, Value, Value> = read_jsonl(&path).unwrap();
        assert_eq!(c.entries.len(), 1);
        assert!(!c.is_complete());
    }

    #[test]
    fn tampered_entries_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut w = JsonlWriter::create(&path, &json!({})).unwrap();
        w.entry(&json!({"case_id": "c1"})).unwrap();
        w.finish(json!({})).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("c1", "c9");
        std::fs::write(&path, text).unwrap();
        assert!(read_jsonl::<Value, Value, Value>(&path).is_err());
    }
}
