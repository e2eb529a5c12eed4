//! Diagnostic cases and the line-delimited corpus format.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::DiagnosisLabel;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate case id '{0}'")]
    DuplicateId(String),
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One diagnostic case. Images are opaque references that are only
/// forwarded to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub clinical_history: String,
    #[serde(default)]
    pub image_refs: Vec<String>,
    pub ground_truth: DiagnosisLabel,
    #[serde(default)]
    pub curated_differentials: Vec<DiagnosisLabel>,
    #[serde(default)]
    pub discussion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub published_year: Option<i32>,
}

/// Reads one case per non-blank line, preserving order.
pub fn parse_case_corpus<R: BufRead>(reader: R) -> Result<Vec<CaseRecord>, CorpusError> {
    let mut cases = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: CaseRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if case.id.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: idx + 1,
                reason: "empty case id".into(),
            });
        }
        if !ids.insert(case.id.clone()) {
            return Err(CorpusError::DuplicateId(case.id));
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn serialize_case_corpus<W: Write>(cases: &[CaseRecord], mut out: W) -> std::io::Result<()> {
    for case in cases {
        serde_json::to_writer(&mut out, case)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<CaseRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    parse_case_corpus(std::io::BufReader::new(file))
}

pub fn write_corpus(path: &Path, cases: &[CaseRecord]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    serialize_case_corpus(cases, &mut buf)?;
    std::fs::write(path, buf)
}
