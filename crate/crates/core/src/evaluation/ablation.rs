//! Ablation grid: one metrics row per named configuration.
//!
//! Construction only depends on the number of rounds here, so the store is
//! built once per distinct `rounds` value (the one-round store is the
//! phase-1 snapshot of the two-round build) and the baseline trials are
//! shared by every row.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{compute_metrics, render_table, MetricsError, MetricsReport};
use super::{run_eval, EvalConfig, EvalError, MemoryAccess, RunSink};
use crate::agent::AgentGateway;
use crate::construction::{self, ConstructionConfig, ConstructionError};
use crate::corpus::CaseRecord;
use crate::retrieval::{EmbeddingProvider, RetrievalConfig};
use crate::store::MemoryStore;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("ablation grid has no rows")]
    EmptyGrid,
    #[error("grid row '{name}': {reason}")]
    InvalidRow { name: String, reason: String },
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn two_rounds() -> u8 {
    2
}

/// A named configuration. Unset retrieval fields inherit the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    #[serde(default = "two_rounds")]
    pub rounds: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_department: Option<bool>,
    /// Published accuracy for this setting; carried as citation metadata and
    /// never compared against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_accuracy: Option<f64>,
}

impl AblationRow {
    fn named(name: &str, reference: f64) -> Self {
        Self {
            name: name.into(),
            rounds: 2,
            tau: None,
            top_k: None,
            max_paths: None,
            cross_department: None,
            reference_accuracy: Some(reference),
        }
    }

    pub fn retrieval(&self, base: &RetrievalConfig) -> RetrievalConfig {
        RetrievalConfig {
            tau: self.tau.unwrap_or(base.tau),
            top_k: self.top_k.unwrap_or(base.top_k),
            max_paths: self.max_paths.unwrap_or(base.max_paths),
            cross_department: self.cross_department.unwrap_or(base.cross_department),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_baseline: Option<f64>,
    #[serde(default)]
    pub rows: Vec<AblationRow>,
}

/// Six rows: default, one round, single department, and three thresholds.
pub fn default_grid() -> AblationGrid {
    AblationGrid {
        reference_baseline: Some(0.696),
        rows: vec![
            AblationRow::named("two-round (default)", 0.745),
            AblationRow {
                rounds: 1,
                ..AblationRow::named("one-round", 0.731)
            },
            AblationRow {
                max_paths: Some(1),
                cross_department: Some(false),
                ..AblationRow::named("single-department", 0.722)
            },
            AblationRow {
                tau: Some(0.80),
                ..AblationRow::named("tau=0.80", 0.731)
            },
            AblationRow {
                tau: Some(0.90),
                ..AblationRow::named("tau=0.90", 0.745)
            },
            AblationRow {
                tau: Some(0.95),
                ..AblationRow::named("tau=0.95", 0.728)
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub rounds: u8,
    pub retrieval: RetrievalConfig,
    pub notes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_accuracy: Option<f64>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_baseline: Option<f64>,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let rows: Vec<(String, &MetricsReport)> =
            self.rows.iter().map(|r| (r.name.clone(), &r.report)).collect();
        let mut out = render_table(&rows);
        let refs: Vec<String> = self
            .reference_baseline
            .map(|b| format!("baseline {:.1}%", b * 100.0))
            .into_iter()
            .chain(self.rows.iter().filter_map(|r| {
                r.reference_accuracy
                    .map(|a| format!("{} {:.1}%", r.name, a * 100.0))
            }))
            .collect();
        if !refs.is_empty() {
            out.push_str(&format!("\nreference accuracy: {}\n", refs.join("; ")));
        }
        out
    }
}

fn validate_grid(grid: &AblationGrid, base: &RetrievalConfig) -> Result<(), AblationError> {
    if grid.rows.is_empty() {
        return Err(AblationError::EmptyGrid);
    }
    for row in &grid.rows {
        let invalid = |reason: String| AblationError::InvalidRow {
            name: row.name.clone(),
            reason,
        };
        if !(1..=2).contains(&row.rounds) {
            return Err(invalid(format!("rounds must be 1 or 2, got {}", row.rounds)));
        }
        row.retrieval(base)
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
    }
    Ok(())
}

/// Runs every grid row against a store built from `corpus`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    testset: &[CaseRecord],
    corpus: &[CaseRecord],
    taxonomy: &Taxonomy,
    agent: &dyn AgentGateway,
    provider: &dyn EmbeddingProvider,
    grid: &AblationGrid,
    construction_config: &ConstructionConfig,
    eval_config: &EvalConfig,
) -> Result<AblationTable, AblationError> {
    validate_grid(grid, &eval_config.retrieval)?;
    let needs = |r: u8| grid.rows.iter().any(|row| row.rounds == r);

    let mut stores: BTreeMap<u8, MemoryStore> = BTreeMap::new();
    let config = ConstructionConfig {
        rounds: 1,
        ..construction_config.clone()
    };
    let mut store = MemoryStore::new(taxonomy.clone());
    let phase1 = construction::run_phase1(corpus, agent, &mut store, &config)?;
    if needs(1) {
        stores.insert(1, store.clone());
    }
    if needs(2) {
        construction::run_phase2(corpus, agent, &mut store, &phase1, provider, &config)?;
        stores.insert(2, store);
    }

    let sink = RunSink::in_memory();
    let baseline = run_eval(testset, agent, None, eval_config, &sink)?;

    let mut rows = Vec::with_capacity(grid.rows.len());
    for row in &grid.rows {
        let store = &stores[&row.rounds];
        let config = EvalConfig {
            retrieval: row.retrieval(&eval_config.retrieval),
            ..eval_config.clone()
        };
        let memory = MemoryAccess { store, provider };
        let exp = run_eval(testset, agent, Some(memory), &config, &sink)?;
        let report = compute_metrics(&baseline, &exp)?;
        tracing::info!(row = %row.name, accuracy = report.accuracy_exp, "ablation row done");
        rows.push(AblationResult {
            name: row.name.clone(),
            rounds: row.rounds,
            retrieval: config.retrieval,
            notes: store.len(),
            reference_accuracy: row.reference_accuracy,
            report,
        });
    }
    Ok(AblationTable {
        reference_baseline: grid.reference_baseline,
        rows,
    })
}
