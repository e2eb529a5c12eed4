//! Anatomically scoped, pair-keyed similarity retrieval of experience notes.
//!
//! Candidate diagnoses are expanded into canonical pairs; each stored note
//! under the selected paths is scored by the best cosine similarity between
//! any query pair display and the note's own pair display. Notes at or above
//! `tau` survive, ranked by similarity and truncated to `top_k`. An agent
//! relevance pass may then drop clearly irrelevant notes.

pub mod embedding;

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentGateway, Relevance};
use crate::corpus::CaseRecord;
use crate::label::{canonical_pair_key, DiagnosisLabel, PairKey};
use crate::note::ExperienceNote;
use crate::store::{MemoryStore, StoreError};
use crate::taxonomy::AnatomicalPath;

pub use embedding::{
    mock_embedding_provider, EmbeddingError, EmbeddingProvider, HttpEmbedder, MemoEmbedder,
    MockEmbedder,
};

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_MAX_PATHS: usize = 2;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cannot compute similarity of a zero vector")]
    ZeroVector,
    #[error("unknown taxonomy path {0}")]
    UnknownPath(AnatomicalPath),
    #[error("{given} paths given but at most {max} allowed")]
    TooManyPaths { given: usize, max: usize },
    #[error("cross-department retrieval disabled but paths span several departments")]
    CrossDepartment,
    #[error("retrieval unavailable: {0}")]
    Unavailable(#[from] EmbeddingError),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub tau: f64,
    pub top_k: usize,
    pub max_paths: usize,
    pub cross_department: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            top_k: DEFAULT_TOP_K,
            max_paths: DEFAULT_MAX_PATHS,
            cross_department: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RetrievalError::InvalidConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.top_k == 0 {
            return Err(RetrievalError::InvalidConfig("top_k must be positive".into()));
        }
        if !(1..=2).contains(&self.max_paths) {
            return Err(RetrievalError::InvalidConfig(format!(
                "max_paths must be 1 or 2, got {}",
                self.max_paths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedNote {
    pub note: ExperienceNote,
    pub similarity: f64,
    pub matched_query_pair: PairKey,
    pub retained_after_filter: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// All unordered pairs of distinct (normalized) candidates, canonical order.
pub fn candidate_pairs(candidates: &[DiagnosisLabel]) -> Vec<PairKey> {
    let mut unique: Vec<&DiagnosisLabel> = Vec::new();
    for c in candidates {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    let mut pairs = BTreeSet::new();
    for (i, a) in unique.iter().enumerate() {
        for b in &unique[i + 1..] {
            if let Ok(key) = canonical_pair_key(a, b) {
                pairs.insert(key);
            }
        }
    }
    pairs.into_iter().collect()
}

/// Ordering used for ranked results: similarity descending, then pair display,
/// then location.
pub fn rank_order(a: &RetrievedNote, b: &RetrievedNote) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| {
            a.note
                .differentials
                .display()
                .cmp(b.note.differentials.display())
        })
        .then_with(|| a.note.department.cmp(&b.note.department))
        .then_with(|| a.note.organ_region.cmp(&b.note.organ_region))
}

/// Scores every note under `paths` against the query pairs, without
/// threshold or truncation.
pub fn score_notes<P: EmbeddingProvider + ?Sized>(
    store: &MemoryStore,
    paths: &[AnatomicalPath],
    candidates: &[DiagnosisLabel],
    provider: &P,
) -> Result<Vec<RetrievedNote>, RetrievalError> {
    let notes = store.notes_under_paths(paths).map_err(|e| match e {
        StoreError::UnknownPath(p) => RetrievalError::UnknownPath(p),
        other => unreachable!("notes_under_paths only fails on unknown paths: {other}"),
    })?;
    let queries = candidate_pairs(candidates);
    if queries.is_empty() || notes.is_empty() {
        return Ok(Vec::new());
    }

    let mut texts: Vec<String> = queries.iter().map(|q| q.display().to_string()).collect();
    texts.extend(notes.iter().map(|n| n.differentials.display().to_string()));
    let vectors = provider.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbeddingError::Malformed(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            vectors.len()
        ))
        .into());
    }
    let (query_vecs, note_vecs) = vectors.split_at(queries.len());

    let mut scored = Vec::with_capacity(notes.len());
    for (note, nv) in notes.into_iter().zip(note_vecs) {
        let mut best: Option<(f64, &PairKey)> = None;
        for (query, qv) in queries.iter().zip(query_vecs) {
            let s = cosine_similarity(qv, nv)?;
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, query));
            }
        }
        let (similarity, matched) = best.expect("queries is non-empty");
        scored.push(RetrievedNote {
            note: note.clone(),
            similarity,
            matched_query_pair: matched.clone(),
            retained_after_filter: true,
        });
    }
    Ok(scored)
}

pub fn retrieve<P: EmbeddingProvider + ?Sized>(
    store: &MemoryStore,
    paths: &[AnatomicalPath],
    candidates: &[DiagnosisLabel],
    provider: &P,
    config: &RetrievalConfig,
) -> Result<Vec<RetrievedNote>, RetrievalError> {
    config.validate()?;
    if paths.len() > config.max_paths {
        return Err(RetrievalError::TooManyPaths {
            given: paths.len(),
            max: config.max_paths,
        });
    }
    if !config.cross_department {
        if let Some(first) = paths.first() {
            if paths.iter().any(|p| p.department != first.department) {
                return Err(RetrievalError::CrossDepartment);
            }
        }
    }
    let mut hits: Vec<_> = score_notes(store, paths, candidates, provider)?
        .into_iter()
        .filter(|r| r.similarity >= config.tau)
        .collect();
    hits.sort_by(rank_order);
    hits.truncate(config.top_k);
    Ok(hits)
}

/// Drops notes the agent judges irrelevant. Unknown verdicts keep the note.
pub fn relevance_filter<A: AgentGateway + ?Sized>(
    agent: &A,
    case: &CaseRecord,
    paths: &[AnatomicalPath],
    retrieved: Vec<RetrievedNote>,
) -> Vec<RetrievedNote> {
    retrieved
        .into_iter()
        .filter_map(|mut r| match agent.score_relevance(case, &r.note, paths) {
            Relevance::Irrelevant => {
                r.retained_after_filter = false;
                tracing::debug!(case = %case.id, note = %r.note.differentials, "note filtered as irrelevant");
                None
            }
            Relevance::Relevant | Relevance::Unknown => Some(r),
        })
        .collect()
}
