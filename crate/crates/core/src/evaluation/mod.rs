//! Paired baseline / with-memory test runs.
//!
//! A run diagnoses every test case once per trial. Baseline runs never see
//! memory; with-memory runs go through scoping, retrieval, the relevance
//! filter and a note-conditioned diagnosis. Both modes use the same attempt
//! index per trial, so a deterministic agent answers identically whenever no
//! note reaches the prompt.

mod ablation;
mod metrics;

pub use ablation::{
    default_grid, run_ablation, AblationError, AblationGrid, AblationResult, AblationRow,
    AblationTable,
};
pub use metrics::{compute_metrics, MetricCounts, MetricsError, MetricsReport};

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{self, AgentGateway, Attempt, CandidateSource, Grading};
use crate::corpus::CaseRecord;
use crate::jsonl::{read_jsonl, JsonlError, JsonlWriter};
use crate::retrieval::{self, EmbeddingProvider, RetrievalConfig};
use crate::store::MemoryStore;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error("cannot resume {path}: {reason}")]
    ResumeMismatch { path: String, reason: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Baseline,
    WithMemory,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::WithMemory => "with-memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: RunMode,
    pub agent: String,
    pub trial: u32,
    /// Effective configuration snapshot.
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEntry {
    pub case_id: String,
    /// At least one note survived the relevance filter.
    pub retrieved: bool,
    #[serde(default)]
    pub note_keys: Vec<String>,
    pub diagnosis: Option<String>,
    pub correct: bool,
    /// Set when the agent call failed; the case then counts as incorrect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub meta: RunMeta,
    pub entries: Vec<RunEntry>,
}

impl RunLog {
    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.failure.is_some()).count()
    }

    pub fn correct(&self) -> usize {
        self.entries.iter().filter(|e| e.correct).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cases: usize,
    pub correct: usize,
    pub retrieved: usize,
    pub failures: usize,
}

impl RunSummary {
    fn of(entries: &[RunEntry]) -> Self {
        Self {
            cases: entries.len(),
            correct: entries.iter().filter(|e| e.correct).count(),
            retrieved: entries.iter().filter(|e| e.retrieved).count(),
            failures: entries.iter().filter(|e| e.failure.is_some()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub retrieval: RetrievalConfig,
    pub candidates: CandidateSource,
    pub grading: Grading,
    pub trials: u32,
    #[serde(skip)]
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            candidates: CandidateSource::Agent,
            grading: Grading::Exact,
            trials: 1,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::InvalidConfig("trials must be at least 1".into()));
        }
        self.retrieval
            .validate()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))
    }
}

/// The memory a with-memory run reads.
#[derive(Clone, Copy)]
pub struct MemoryAccess<'a> {
    pub store: &'a MemoryStore,
    pub provider: &'a dyn EmbeddingProvider,
}

/// Where and with what metadata run logs are written.
#[derive(Debug, Clone, Default)]
pub struct RunSink {
    /// Directory for `<mode>-trial<t>.jsonl` files; `None` keeps logs in memory.
    pub dir: Option<PathBuf>,
    /// Extra context echoed into every log header next to the eval config.
    pub metadata: Value,
}

impl RunSink {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn log_path(&self, mode: RunMode, trial: u32) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}-trial{}.jsonl", mode.as_str(), trial)))
    }
}

/// Evaluates one case. Never fails: agent errors become incorrect entries.
pub fn evaluate_case(
    agent: &dyn AgentGateway,
    case: &CaseRecord,
    memory: Option<MemoryAccess<'_>>,
    config: &EvalConfig,
    trial: u32,
) -> RunEntry {
    let attempt = Attempt::Eval { trial };
    let mut detail = None;
    let retained = match memory {
        None => Vec::new(),
        Some(mem) => {
            let paths = agent::select_paths(agent, case, mem.store.taxonomy(), &config.retrieval);
            if paths.is_empty() {
                Vec::new()
            } else {
                let candidates = agent::propose_candidates(agent, case, config.candidates, attempt);
                match retrieval::retrieve(mem.store, &paths, &candidates, mem.provider, &config.retrieval) {
                    Ok(hits) => retrieval::relevance_filter(agent, case, &paths, hits),
                    Err(err) => {
                        detail = Some(format!("memory-free fallback: {err}"));
                        Vec::new()
                    }
                }
            }
        }
    };
    let note_keys = retained
        .iter()
        .map(|r| r.note.differentials.display().to_string())
        .collect();
    match agent::diagnose(agent, case, &retained, attempt) {
        Ok(d) => RunEntry {
            case_id: case.id.clone(),
            retrieved: !retained.is_empty(),
            note_keys,
            correct: agent::grade(agent, case, &d.label, config.grading),
            diagnosis: Some(d.label.text().to_string()),
            failure: None,
            detail,
        },
        Err(err) => RunEntry {
            case_id: case.id.clone(),
            retrieved: !retained.is_empty(),
            note_keys,
            diagnosis: None,
            correct: false,
            failure: Some(err.to_string()),
            detail,
        },
    }
}

fn mismatch(path: &Path, reason: impl Into<String>) -> EvalError {
    EvalError::ResumeMismatch {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Loads the entries of an interrupted run so it can continue.
fn resume_entries(
    path: &Path,
    meta: &RunMeta,
    testset: &[CaseRecord],
) -> Result<Vec<RunEntry>, EvalError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let prior = read_jsonl::<RunMeta, RunEntry, RunSummary>(path)?;
    if &prior.meta != meta {
        return Err(mismatch(path, "log header differs from the current run"));
    }
    let ids: HashSet<&str> = testset.iter().map(|c| c.id.as_str()).collect();
    let mut seen = HashSet::new();
    for e in &prior.entries {
        if !ids.contains(e.case_id.as_str()) {
            return Err(mismatch(path, format!("case '{}' is not in the test set", e.case_id)));
        }
        if !seen.insert(e.case_id.as_str()) {
            return Err(mismatch(path, format!("case '{}' logged twice", e.case_id)));
        }
    }
    Ok(prior.entries)
}

const CHUNK_PER_WORKER: usize = 4;

/// Runs one trial, appending entries to the log file chunk by chunk so an
/// interrupted run leaves a valid partial log that a re-run resumes.
pub fn run_trial(
    testset: &[CaseRecord],
    agent: &dyn AgentGateway,
    memory: Option<MemoryAccess<'_>>,
    config: &EvalConfig,
    trial: u32,
    sink: &RunSink,
) -> Result<RunLog, EvalError> {
    config.validate()?;
    let mode = if memory.is_some() {
        RunMode::WithMemory
    } else {
        RunMode::Baseline
    };
    let meta = RunMeta {
        mode,
        agent: agent.identity(),
        trial,
        config: serde_json::json!({ "eval": config, "run": sink.metadata }),
    };
    let path = sink.log_path(mode, trial);

    let mut done: HashMap<String, RunEntry> = HashMap::new();
    if let Some(p) = &path {
        for e in resume_entries(p, &meta, testset)? {
            done.insert(e.case_id.clone(), e);
        }
    }
    if !done.is_empty() {
        tracing::info!(mode = mode.as_str(), trial, resumed = done.len(), "resuming run");
    }

    let mut writer = match &path {
        Some(p) => Some(JsonlWriter::create(p, &meta)?),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let chunk = config.workers.max(1) * CHUNK_PER_WORKER;

    let mut entries = Vec::with_capacity(testset.len());
    for cases in testset.chunks(chunk) {
        let fresh: Vec<Option<RunEntry>> = pool.install(|| {
            cases
                .par_iter()
                .map(|case| {
                    (!done.contains_key(&case.id))
                        .then(|| evaluate_case(agent, case, memory, config, trial))
                })
                .collect()
        });
        for (case, entry) in cases.iter().zip(fresh) {
            let entry = match entry {
                Some(e) => e,
                None => done.remove(&case.id).expect("resumed entry present"),
            };
            if let Some(w) = writer.as_mut() {
                w.entry(&entry)?;
            }
            entries.push(entry);
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
    }
    if let Some(w) = writer {
        w.finish(RunSummary::of(&entries))?;
    }
    Ok(RunLog { meta, entries })
}

/// Runs `config.trials` trials; `memory = None` is a baseline run.
pub fn run_eval(
    testset: &[CaseRecord],
    agent: &dyn AgentGateway,
    memory: Option<MemoryAccess<'_>>,
    config: &EvalConfig,
    sink: &RunSink,
) -> Result<Vec<RunLog>, EvalError> {
    config.validate()?;
    if let Some(dir) = &sink.dir {
        std::fs::create_dir_all(dir).map_err(|source| {
            EvalError::Log(JsonlError::Io {
                path: dir.display().to_string(),
                source,
            })
        })?;
    }
    (0..config.trials)
        .map(|t| run_trial(testset, agent, memory, config, t, sink))
        .collect()
}

/// Reads a run log file back.
pub fn read_run_log(path: &Path) -> Result<RunLog, EvalError> {
    let c = read_jsonl::<RunMeta, RunEntry, RunSummary>(path)?;
    Ok(RunLog {
        meta: c.meta,
        entries: c.entries,
    })
}
