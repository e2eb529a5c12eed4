//! Editable prompt templates and parsers for agent responses.

use std::path::Path;

use serde::de::DeserializeOwned;

use super::{NoteDraft, PathProposal, Relevance};
use crate::label::DiagnosisLabel;
use crate::note::ExperienceNote;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub system: String,
    pub diagnose: String,
    pub notes_header: String,
    pub candidates: String,
    pub paths: String,
    pub extract: String,
    pub relevance: String,
    pub judge: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: include_str!("../../prompts/system.txt").into(),
            diagnose: include_str!("../../prompts/diagnose.txt").into(),
            notes_header: include_str!("../../prompts/notes_header.txt").into(),
            candidates: include_str!("../../prompts/candidates.txt").into(),
            paths: include_str!("../../prompts/paths.txt").into(),
            extract: include_str!("../../prompts/extract.txt").into(),
            relevance: include_str!("../../prompts/relevance.txt").into(),
            judge: include_str!("../../prompts/judge.txt").into(),
        }
    }
}

impl PromptTemplates {
    /// Defaults, with any `<name>.txt` present in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Self::default();
        let slots: [(&str, &mut String); 8] = [
            ("system", &mut t.system),
            ("diagnose", &mut t.diagnose),
            ("notes_header", &mut t.notes_header),
            ("candidates", &mut t.candidates),
            ("paths", &mut t.paths),
            ("extract", &mut t.extract),
            ("relevance", &mut t.relevance),
            ("judge", &mut t.judge),
        ];
        for (name, slot) in slots {
            let file = dir.join(format!("{name}.txt"));
            if file.exists() {
                *slot = std::fs::read_to_string(file)?;
            }
        }
        Ok(t)
    }
}

/// Replaces every `{{key}}` placeholder.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

/// Full text of a note as it is shown to the agent.
pub fn render_note(note: &ExperienceNote) -> String {
    let mut out = format!(
        "### {} ({} / {})\nConfusions:\n",
        note.differentials, note.department, note.organ_region
    );
    for c in &note.confusions {
        out.push_str(&format!("- {c}\n"));
    }
    out.push_str("Discriminators:\n");
    for (label, text) in &note.discriminators {
        out.push_str(&format!("- {label}: {text}\n"));
    }
    out.push_str("Decision rules:\n");
    for r in &note.decision_rule {
        out.push_str(&format!("- {r}\n"));
    }
    if !note.error_analysis.is_empty() {
        out.push_str("Past reasoning errors:\n");
        for e in &note.error_analysis {
            out.push_str(&format!("- {e}\n"));
        }
    }
    out
}

pub fn render_taxonomy(taxonomy: &Taxonomy) -> String {
    taxonomy
        .departments()
        .iter()
        .map(|d| format!("- {}: {}", d.name, d.organs.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits a diagnosis response at its last `FINAL DIAGNOSIS:` line.
pub fn parse_final_answer(text: &str) -> Option<(String, DiagnosisLabel)> {
    const MARKER: &str = "final diagnosis";
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate().rev() {
        let trimmed = line.trim().trim_start_matches(['*', '#', ' ']);
        if trimmed.len() < MARKER.len() || !trimmed.is_char_boundary(MARKER.len()) {
            continue;
        }
        let (head, rest) = trimmed.split_at(MARKER.len());
        if !head.eq_ignore_ascii_case(MARKER) {
            continue;
        }
        let Some(answer) = rest.trim_start().strip_prefix(':') else {
            continue;
        };
        let answer = answer.trim().trim_matches(['*', '"', '.']);
        if let Ok(label) = DiagnosisLabel::new(answer) {
            return Some((lines[..i].join("\n").trim().to_string(), label));
        }
    }
    None
}

/// Returns the contents of the first fenced code block, if any.
fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

fn json_slice(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let end = text.rfind(close)?;
    (end > start).then(|| &text[start..=end])
}

fn parse_json<T: DeserializeOwned>(text: &str, open: char, close: char) -> Result<T, String> {
    let candidates = [fenced_block(text), json_slice(text, open, close)];
    let mut last_err = "no JSON found in response".to_string();
    for c in candidates.into_iter().flatten() {
        match serde_json::from_str::<T>(c.trim()) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(last_err)
}

pub fn parse_candidates(text: &str) -> Result<Vec<DiagnosisLabel>, String> {
    let raw: Vec<String> = parse_json(text, '[', ']').or_else(|err| {
        let bullets: Vec<String> = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix("- ").map(str::to_string))
            .collect();
        if bullets.is_empty() {
            Err(err)
        } else {
            Ok(bullets)
        }
    })?;
    Ok(raw
        .into_iter()
        .filter_map(|s| DiagnosisLabel::new(s).ok())
        .collect())
}

pub fn parse_paths(text: &str) -> Result<Vec<PathProposal>, String> {
    parse_json(text, '[', ']')
}

pub fn parse_note_draft(text: &str) -> Result<NoteDraft, String> {
    parse_json(text, '{', '}')
}

pub fn parse_relevance(text: &str) -> Relevance {
    let upper = text.to_uppercase();
    if upper.contains("IRRELEVANT") {
        Relevance::Irrelevant
    } else if upper.contains("RELEVANT") {
        Relevance::Relevant
    } else {
        Relevance::Unknown
    }
}

pub fn parse_verdict(text: &str) -> Option<bool> {
    let lower = text.to_lowercase();
    let rest = &lower[lower.rfind("verdict:")? + "verdict:".len()..];
    match rest.split_whitespace().next()? {
        w if w.starts_with("yes") => Some(true),
        w if w.starts_with("no") => Some(false),
        _ => None,
    }
}
