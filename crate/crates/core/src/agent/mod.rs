//! Contract for every interaction with the diagnostic agent, plus the
//! policies wrapped around it: answer extraction, path repair, candidate
//! fallback and the note extraction repair loop.

pub mod mock;
pub mod prompt;
pub mod remote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CaseRecord;
use crate::label::{canonical_pair_key, DiagnosisLabel, LabelError};
use crate::note::{validate_note, ExperienceNote, PhaseTag, Provenance};
use crate::retrieval::{RetrievalConfig, RetrievedNote};
use crate::taxonomy::{AnatomicalPath, Taxonomy, OTHERS};

pub use mock::{ConfusionEntry, ErrorMode, MisleadingRule, MockAgent, MockAgentScript, Route};
pub use remote::{RemoteAgent, RemoteAgentConfig};

/// Maximum number of candidate hypotheses handed to retrieval.
pub const MAX_CANDIDATES: usize = 6;
/// Re-prompts allowed after a malformed extraction response.
pub const EXTRACTION_REPROMPTS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("agent unavailable: {0}")]
    Unavailable(String),
    #[error("malformed agent response: {0}")]
    MalformedResponse(String),
    #[error("note extraction failed: {0}")]
    ExtractionFailed(String),
    #[error(transparent)]
    EqualLabels(#[from] LabelError),
    #[error("case {0} has no expert discussion to extract from")]
    MissingDiscussion(String),
}

/// Identifies which pass a diagnosis belongs to. Stochastic agents key
/// their randomness on it so repeated passes are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attempt {
    Phase1,
    Phase2,
    Eval { trial: u32 },
}

impl Attempt {
    pub fn index(self) -> u64 {
        match self {
            Attempt::Phase1 => 0,
            Attempt::Phase2 => 1,
            Attempt::Eval { trial } => 1_000 + u64::from(trial),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: DiagnosisLabel,
    pub rationale: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Relevant,
    Irrelevant,
    Unknown,
}

/// A department/organ pair as named by the agent, before repair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathProposal {
    pub department: String,
    pub organ: String,
}

/// Agent-authored note content; location, pair and provenance are filled
/// in by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteDraft {
    pub confusions: Vec<String>,
    pub discriminators: BTreeMap<String, String>,
    pub decision_rule: Vec<String>,
    #[serde(default)]
    pub error_analysis: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExtractionRequest<'a> {
    pub case: &'a CaseRecord,
    pub wrong: &'a DiagnosisLabel,
    pub truth: &'a DiagnosisLabel,
    pub path: &'a AnatomicalPath,
    pub tag: PhaseTag,
}

/// Where retrieval candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    #[default]
    Agent,
    Dataset,
}

pub trait AgentGateway: Send + Sync {
    /// Model name recorded in logs.
    fn identity(&self) -> String;

    /// `notes` holds only notes retained after relevance filtering.
    fn diagnose(
        &self,
        case: &CaseRecord,
        notes: &[RetrievedNote],
        attempt: Attempt,
    ) -> Result<Diagnosis, AgentError>;

    fn propose_candidates(&self, case: &CaseRecord) -> Result<Vec<DiagnosisLabel>, AgentError>;

    fn select_paths(
        &self,
        case: &CaseRecord,
        taxonomy: &Taxonomy,
    ) -> Result<Vec<PathProposal>, AgentError>;

    /// `feedback` carries the reason the previous response was rejected.
    fn extract_note(
        &self,
        request: &ExtractionRequest<'_>,
        feedback: Option<&str>,
    ) -> Result<NoteDraft, AgentError>;

    fn score_relevance(
        &self,
        case: &CaseRecord,
        note: &ExperienceNote,
        selected: &[AnatomicalPath],
    ) -> Relevance;

    /// Grades a prediction when agent-judged matching is enabled.
    fn judge_match(&self, case: &CaseRecord, predicted: &DiagnosisLabel) -> Result<bool, AgentError> {
        Ok(predicted.matches(&case.ground_truth))
    }
}

/// How a predicted label is compared with the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grading {
    /// Normalized exact match.
    #[default]
    Exact,
    /// Exact match, otherwise ask the agent whether the labels agree.
    Agent,
}

pub fn grade(agent: &dyn AgentGateway, case: &CaseRecord, predicted: &DiagnosisLabel, grading: Grading) -> bool {
    if predicted.matches(&case.ground_truth) {
        return true;
    }
    match grading {
        Grading::Exact => false,
        Grading::Agent => agent.judge_match(case, predicted).unwrap_or_else(|err| {
            tracing::warn!(case = %case.id, error = %err, "judge failed; falling back to exact match");
            false
        }),
    }
}

/// Diagnoses with the notes that survived filtering.
pub fn diagnose(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    notes: &[RetrievedNote],
    attempt: Attempt,
) -> Result<Diagnosis, AgentError> {
    let retained: Vec<RetrievedNote> = notes
        .iter()
        .filter(|n| n.retained_after_filter)
        .cloned()
        .collect();
    agent.diagnose(case, &retained, attempt)
}

fn dedupe_truncate(labels: impl IntoIterator<Item = DiagnosisLabel>) -> Vec<DiagnosisLabel> {
    let mut out: Vec<DiagnosisLabel> = Vec::new();
    for l in labels {
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out.truncate(MAX_CANDIDATES);
    out
}

/// Candidate hypotheses for retrieval.
///
/// In dataset mode the curated differentials are combined with the agent's
/// memory-free top hypothesis. Agent outages fall back to the curated list.
pub fn propose_candidates(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    source: CandidateSource,
    attempt: Attempt,
) -> Vec<DiagnosisLabel> {
    match source {
        CandidateSource::Dataset => {
            let top = agent.diagnose(case, &[], attempt).ok().map(|d| d.label);
            dedupe_truncate(case.curated_differentials.iter().cloned().chain(top))
        }
        CandidateSource::Agent => match agent.propose_candidates(case) {
            Ok(labels) => dedupe_truncate(labels),
            Err(err) => {
                tracing::warn!(case = %case.id, error = %err, "candidate proposal failed; using curated differentials");
                dedupe_truncate(case.curated_differentials.iter().cloned())
            }
        },
    }
}

/// Maps agent-named paths onto the taxonomy.
///
/// Unknown organs under a known department become `(department, "others")`;
/// unknown departments are dropped. Without cross-department retrieval only
/// paths in the first surviving department are kept. The result holds at
/// most `max_paths` entries in response order.
pub fn repair_paths(
    proposals: &[PathProposal],
    taxonomy: &Taxonomy,
    config: &RetrievalConfig,
) -> Vec<AnatomicalPath> {
    let mut out: Vec<AnatomicalPath> = Vec::new();
    for p in proposals {
        let Some(dept) = taxonomy.resolve_department(&p.department) else {
            continue;
        };
        let organ = taxonomy.resolve_organ(dept, &p.organ).unwrap_or(OTHERS);
        let path = AnatomicalPath::new(dept, organ);
        if out.contains(&path) {
            continue;
        }
        if !config.cross_department && out.first().is_some_and(|f| f.department != path.department)
        {
            continue;
        }
        out.push(path);
        if out.len() == config.max_paths {
            break;
        }
    }
    out
}

pub fn select_paths(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    taxonomy: &Taxonomy,
    config: &RetrievalConfig,
) -> Vec<AnatomicalPath> {
    match agent.select_paths(case, taxonomy) {
        Ok(proposals) => repair_paths(&proposals, taxonomy, config),
        Err(err) => {
            tracing::warn!(case = %case.id, error = %err, "path selection failed");
            Vec::new()
        }
    }
}

fn assemble_note(
    request: &ExtractionRequest<'_>,
    draft: NoteDraft,
) -> Result<ExperienceNote, LabelError> {
    Ok(ExperienceNote {
        department: request.path.department.clone(),
        organ_region: request.path.organ.clone(),
        differentials: canonical_pair_key(request.wrong, request.truth)?,
        confusions: draft.confusions,
        discriminators: draft.discriminators,
        decision_rule: draft.decision_rule,
        error_analysis: draft.error_analysis,
        provenance: vec![Provenance::new(request.case.id.clone(), request.tag)],
    })
}

/// Extracts a validated note, re-prompting up to twice on unusable output.
pub fn extract_note(
    agent: &dyn AgentGateway,
    request: &ExtractionRequest<'_>,
    taxonomy: &Taxonomy,
) -> Result<ExperienceNote, AgentError> {
    canonical_pair_key(request.wrong, request.truth)?;
    if request.case.discussion.trim().is_empty() {
        return Err(AgentError::MissingDiscussion(request.case.id.clone()));
    }
    let mut feedback: Option<String> = None;
    for _ in 0..=EXTRACTION_REPROMPTS {
        let draft = match agent.extract_note(request, feedback.as_deref()) {
            Ok(draft) => draft,
            Err(AgentError::MalformedResponse(reason)) => {
                feedback = Some(reason);
                continue;
            }
            Err(other) => return Err(AgentError::ExtractionFailed(other.to_string())),
        };
        let note = assemble_note(request, draft)?;
        let violations = validate_note(&note, taxonomy);
        if violations.is_empty() {
            return Ok(note);
        }
        feedback = Some(violations.join("; "));
    }
    Err(AgentError::ExtractionFailed(format!(
        "no valid note after {} re-prompts: {}",
        EXTRACTION_REPROMPTS,
        feedback.unwrap_or_default()
    )))
}
