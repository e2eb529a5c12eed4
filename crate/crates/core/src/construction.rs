//! Two-phase experience memory construction.
//!
//! Phase 1 diagnoses every case without memory and turns each error into a
//! note for the (wrong, truth) pair. Phase 2 re-diagnoses every case with
//! retrieval and then:
//!
//! * extracts a new note when the error has no note yet,
//! * supplements the existing note when one was available but the case
//!   still failed,
//! * annotates the retained notes as misleading when a case that was correct
//!   in phase 1 now fails with notes in the prompt,
//! * leaves the store untouched when the case is correct.
//!
//! Agent calls for different cases run on a worker pool, but store mutations
//! and log entries are always applied in corpus order, so results do not
//! depend on the worker count.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    self, AgentError, AgentGateway, Attempt, CandidateSource, Grading, ExtractionRequest,
};
use crate::corpus::CaseRecord;
use crate::jsonl::{JsonlError, JsonlWriter};
use crate::label::{canonical_pair_key, DiagnosisLabel};
use crate::note::{ExperienceNote, PhaseTag, Provenance};
use crate::retrieval::{self, EmbeddingProvider, RetrievalConfig, RetrievedNote};
use crate::store::{MemoryStore, StoreError};
use crate::taxonomy::AnatomicalPath;

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error("invalid construction config: {0}")]
    InvalidConfig(String),
    #[error("phase 1 log has no entry for case '{0}'")]
    Phase1Incomplete(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Which store phase-2 retrieval reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotMode {
    /// Retrieval sees notes written by earlier cases of the same pass.
    #[default]
    Streaming,
    /// Retrieval reads the store as it was when the pass began.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionConfig {
    pub rounds: u8,
    pub retrieval: RetrievalConfig,
    pub snapshot: SnapshotMode,
    pub candidates: CandidateSource,
    pub grading: Grading,
    /// Worker threads for agent calls; does not affect results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            retrieval: RetrievalConfig::default(),
            snapshot: SnapshotMode::Streaming,
            candidates: CandidateSource::Agent,
            grading: Grading::Exact,
            workers: 1,
        }
    }
}

impl ConstructionConfig {
    pub fn validate(&self) -> Result<(), ConstructionError> {
        if !(1..=2).contains(&self.rounds) {
            return Err(ConstructionError::InvalidConfig(format!(
                "rounds must be 1 or 2, got {}",
                self.rounds
            )));
        }
        self.retrieval
            .validate()
            .map_err(|e| ConstructionError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    None,
    NoteExtracted,
    NoteSupplemented,
    NoteFlaggedMisleading,
    ExtractionFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionEntry {
    pub case_id: String,
    pub phase: u8,
    /// `None` when the agent produced no usable diagnosis.
    pub diagnosis: Option<String>,
    pub correct: bool,
    #[serde(default)]
    pub retrieved_note_keys: Vec<String>,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionLog {
    pub entries: Vec<ConstructionEntry>,
}

impl ConstructionLog {
    pub fn summary(&self) -> BTreeMap<Action, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.action).or_insert(0) += 1;
        }
        counts
    }

    pub fn phase(&self, phase: u8) -> impl Iterator<Item = &ConstructionEntry> {
        self.entries.iter().filter(move |e| e.phase == phase)
    }

    /// Cases whose agent call or extraction failed.
    pub fn failures(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.action == Action::ExtractionFailed || e.diagnosis.is_none())
            .count()
    }

    pub fn extend(&mut self, other: ConstructionLog) {
        self.entries.extend(other.entries);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSummary {
    pub counts: BTreeMap<Action, usize>,
}

/// Writes the log as line-delimited records with `metadata` in the header.
pub fn write_log(
    log: &ConstructionLog,
    path: &Path,
    metadata: &serde_json::Value,
) -> Result<(), JsonlError> {
    let mut w = JsonlWriter::create(path, &serde_json::json!({ "metadata": metadata }))?;
    for e in &log.entries {
        w.entry(e)?;
    }
    w.finish(LogSummary {
        counts: log.summary(),
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, ConstructionError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ConstructionError::Pool(e.to_string()))
}

/// Outcome of the per-case work that does not touch the store.
struct Phase1Work {
    diagnosis: Result<DiagnosisLabel, AgentError>,
    correct: bool,
    note: Option<Result<ExperienceNote, AgentError>>,
}

fn placement_error() -> AgentError {
    AgentError::ExtractionFailed("no valid anatomical path for note placement".into())
}

fn extract_for(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    wrong: &DiagnosisLabel,
    path: Option<&AnatomicalPath>,
    tag: PhaseTag,
    store: &MemoryStore,
) -> Result<ExperienceNote, AgentError> {
    let path = path.ok_or_else(placement_error)?;
    agent::extract_note(
        agent,
        &ExtractionRequest {
            case,
            wrong,
            truth: &case.ground_truth,
            path,
            tag,
        },
        store.taxonomy(),
    )
}

fn phase1_work(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    store: &MemoryStore,
    config: &ConstructionConfig,
) -> Phase1Work {
    let diagnosis = agent::diagnose(agent, case, &[], Attempt::Phase1).map(|d| d.label);
    let Ok(label) = &diagnosis else {
        return Phase1Work {
            diagnosis,
            correct: false,
            note: None,
        };
    };
    let correct = agent::grade(agent, case, label, config.grading);
    let note = (!correct).then(|| {
        let paths = agent::select_paths(agent, case, store.taxonomy(), &config.retrieval);
        extract_for(agent, case, label, paths.first(), PhaseTag::Phase1, store)
    });
    Phase1Work {
        diagnosis,
        correct,
        note,
    }
}

/// Memory-free pass over `corpus`; every error becomes a note.
pub fn run_phase1(
    corpus: &[CaseRecord],
    agent: &dyn AgentGateway,
    store: &mut MemoryStore,
    config: &ConstructionConfig,
) -> Result<ConstructionLog, ConstructionError> {
    config.validate()?;
    let snapshot: &MemoryStore = store;
    let work: Vec<Phase1Work> = pool(config.workers)?.install(|| {
        corpus
            .par_iter()
            .map(|case| phase1_work(agent, case, snapshot, config))
            .collect()
    });

    let mut log = ConstructionLog::default();
    for (case, w) in corpus.iter().zip(work) {
        let mut entry = ConstructionEntry {
            case_id: case.id.clone(),
            phase: 1,
            diagnosis: w.diagnosis.as_ref().ok().map(|l| l.text().to_string()),
            correct: w.correct,
            retrieved_note_keys: Vec::new(),
            action: Action::None,
            detail: w.diagnosis.as_ref().err().map(ToString::to_string),
        };
        match w.note {
            None => {}
            Some(Ok(note)) => match store.insert_or_merge(note) {
                Ok(_) => entry.action = Action::NoteExtracted,
                Err(err) => {
                    entry.action = Action::ExtractionFailed;
                    entry.detail = Some(err.to_string());
                }
            },
            Some(Err(err)) => {
                entry.action = Action::ExtractionFailed;
                entry.detail = Some(err.to_string());
            }
        }
        log.entries.push(entry);
    }
    Ok(log)
}

/// Per-case phase-2 inputs that do not depend on the store.
struct Scoping {
    paths: Vec<AnatomicalPath>,
    candidates: Vec<DiagnosisLabel>,
}

struct Phase2Work {
    paths: Vec<AnatomicalPath>,
    retained: Vec<RetrievedNote>,
    diagnosis: Result<DiagnosisLabel, AgentError>,
    correct: bool,
    retrieval_detail: Option<String>,
}

fn phase2_diagnose(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    scoping: Scoping,
    store: &MemoryStore,
    provider: &dyn EmbeddingProvider,
    config: &ConstructionConfig,
) -> Phase2Work {
    let mut retrieval_detail = None;
    let retained = if scoping.paths.is_empty() {
        Vec::new()
    } else {
        match retrieval::retrieve(
            store,
            &scoping.paths,
            &scoping.candidates,
            provider,
            &config.retrieval,
        ) {
            Ok(hits) => retrieval::relevance_filter(agent, case, &scoping.paths, hits),
            Err(err) => {
                retrieval_detail = Some(format!("memory-free fallback: {err}"));
                Vec::new()
            }
        }
    };
    let diagnosis = agent::diagnose(agent, case, &retained, Attempt::Phase2).map(|d| d.label);
    let correct = diagnosis
        .as_ref()
        .is_ok_and(|l| agent::grade(agent, case, l, config.grading));
    Phase2Work {
        paths: scoping.paths,
        retained,
        diagnosis,
        correct,
        retrieval_detail,
    }
}

/// Where an error's note belongs: the location of a retained note for the
/// same pair if there is one, else the first selected path.
fn phase2_target(
    case: &CaseRecord,
    wrong: &DiagnosisLabel,
    work: &Phase2Work,
    store: &MemoryStore,
) -> (Option<AnatomicalPath>, bool) {
    let Ok(key) = canonical_pair_key(wrong, &case.ground_truth) else {
        return (work.paths.first().cloned(), false);
    };
    if let Some(hit) = work.retained.iter().find(|r| r.note.differentials == key) {
        return (Some(hit.note.path()), true);
    }
    match work.paths.first() {
        Some(p) => (Some(p.clone()), store.get(p, &key).is_some()),
        None => (None, false),
    }
}

fn misleading_addendum(
    stored: &ExperienceNote,
    case: &CaseRecord,
    wrong: &DiagnosisLabel,
) -> ExperienceNote {
    let mut addendum = stored.clone();
    addendum.error_analysis = vec![format!(
        "case {}: correct without memory ({}) but answered {} with this note retained",
        case.id, case.ground_truth, wrong
    )];
    addendum.provenance = vec![Provenance::new(case.id.clone(), PhaseTag::Phase2Misleading)];
    addendum
}

fn apply_phase2(
    case: &CaseRecord,
    work: Phase2Work,
    phase1_correct: bool,
    agent: &dyn AgentGateway,
    store: &mut MemoryStore,
) -> ConstructionEntry {
    let mut entry = ConstructionEntry {
        case_id: case.id.clone(),
        phase: 2,
        diagnosis: work.diagnosis.as_ref().ok().map(|l| l.text().to_string()),
        correct: work.correct,
        retrieved_note_keys: work
            .retained
            .iter()
            .map(|r| r.note.differentials.display().to_string())
            .collect(),
        action: Action::None,
        detail: work.retrieval_detail.clone(),
    };
    let wrong = match &work.diagnosis {
        Err(err) => {
            entry.detail = Some(err.to_string());
            return entry;
        }
        Ok(_) if work.correct => return entry,
        Ok(label) => label.clone(),
    };

    let result: Result<Action, String> = if phase1_correct && !work.retained.is_empty() {
        let mut outcome = Ok(Action::NoteFlaggedMisleading);
        for hit in &work.retained {
            let Some(stored) = store.get(&hit.note.path(), &hit.note.differentials) else {
                continue;
            };
            let addendum = misleading_addendum(stored, case, &wrong);
            if let Err(err) = store.insert_or_merge(addendum) {
                outcome = Err(err.to_string());
                break;
            }
        }
        outcome
    } else {
        let (target, existed) = phase2_target(case, &wrong, &work, store);
        extract_for(
            agent,
            case,
            &wrong,
            target.as_ref(),
            PhaseTag::Phase2Supplement,
            store,
        )
        .map_err(|e| e.to_string())
        .and_then(|note| store.insert_or_merge(note).map_err(|e| e.to_string()))
        .map(|_| {
            if existed {
                Action::NoteSupplemented
            } else {
                Action::NoteExtracted
            }
        })
    };
    match result {
        Ok(action) => entry.action = action,
        Err(reason) => {
            entry.action = Action::ExtractionFailed;
            entry.detail = Some(reason);
        }
    }
    entry
}

/// Memory-assisted re-diagnosis of every case in `corpus`.
pub fn run_phase2(
    corpus: &[CaseRecord],
    agent: &dyn AgentGateway,
    store: &mut MemoryStore,
    phase1_log: &ConstructionLog,
    provider: &dyn EmbeddingProvider,
    config: &ConstructionConfig,
) -> Result<ConstructionLog, ConstructionError> {
    config.validate()?;
    let phase1: HashMap<&str, bool> = phase1_log
        .phase(1)
        .map(|e| (e.case_id.as_str(), e.correct))
        .collect();
    let phase1_correct: Vec<bool> = corpus
        .iter()
        .map(|c| {
            phase1
                .get(c.id.as_str())
                .copied()
                .ok_or_else(|| ConstructionError::Phase1Incomplete(c.id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let pool = pool(config.workers)?;
    let taxonomy = store.taxonomy().clone();
    let scoping: Vec<Scoping> = pool.install(|| {
        corpus
            .par_iter()
            .map(|case| Scoping {
                paths: agent::select_paths(agent, case, &taxonomy, &config.retrieval),
                candidates: agent::propose_candidates(
                    agent,
                    case,
                    config.candidates,
                    Attempt::Phase2,
                ),
            })
            .collect()
    });

    let mut log = ConstructionLog::default();
    match config.snapshot {
        SnapshotMode::Streaming => {
            for ((case, scope), p1) in corpus.iter().zip(scoping).zip(&phase1_correct) {
                let work = phase2_diagnose(agent, case, scope, store, provider, config);
                log.entries.push(apply_phase2(case, work, *p1, agent, store));
            }
        }
        SnapshotMode::Frozen => {
            let frozen = store.clone();
            let work: Vec<Phase2Work> = pool.install(|| {
                corpus
                    .par_iter()
                    .zip(scoping.into_par_iter())
                    .map(|(case, scope)| {
                        phase2_diagnose(agent, case, scope, &frozen, provider, config)
                    })
                    .collect()
            });
            for ((case, w), p1) in corpus.iter().zip(work).zip(&phase1_correct) {
                log.entries.push(apply_phase2(case, w, *p1, agent, store));
            }
        }
    }
    Ok(log)
}

/// Runs one or two construction rounds into `store`.
pub fn build_into(
    store: &mut MemoryStore,
    corpus: &[CaseRecord],
    agent: &dyn AgentGateway,
    provider: &dyn EmbeddingProvider,
    config: &ConstructionConfig,
) -> Result<ConstructionLog, ConstructionError> {
    config.validate()?;
    let mut log = run_phase1(corpus, agent, store, config)?;
    tracing::info!(notes = store.len(), "phase 1 complete");
    if config.rounds == 2 {
        let phase2 = run_phase2(corpus, agent, store, &log, provider, config)?;
        log.extend(phase2);
        tracing::info!(notes = store.len(), "phase 2 complete");
    }
    Ok(log)
}

/// Builds a fresh store from `corpus`.
pub fn build(
    taxonomy: crate::taxonomy::Taxonomy,
    corpus: &[CaseRecord],
    agent: &dyn AgentGateway,
    provider: &dyn EmbeddingProvider,
    config: &ConstructionConfig,
) -> Result<(MemoryStore, ConstructionLog), ConstructionError> {
    config.validate()?;
    let mut store = MemoryStore::new(taxonomy);
    let log = build_into(&mut store, corpus, agent, provider, config)?;
    Ok((store, log))
}

/// Persists a build: the store document and the construction log.
pub fn save_build(
    store: &MemoryStore,
    log: &ConstructionLog,
    store_path: &Path,
    log_path: &Path,
    metadata: &serde_json::Value,
) -> Result<(), ConstructionError> {
    store.save_with_metadata(store_path, Some(metadata.clone()))?;
    write_log(log, log_path, metadata)?;
    Ok(())
}
