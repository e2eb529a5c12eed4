//! Paired baseline / with-memory metric suite.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RunEntry, RunLog};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no run logs supplied")]
    Empty,
    #[error("baseline has {baseline} trials but with-memory has {exp}")]
    TrialCountMismatch { baseline: usize, exp: usize },
    #[error("run logs cover different case sets")]
    CaseSetMismatch,
}

/// Counts that back every fraction in the report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub cases: usize,
    pub trials: usize,
    pub baseline_correct: usize,
    pub exp_correct: usize,
    /// Cases with at least one retained note in some with-memory trial.
    pub retrieved_cases: usize,
    /// With-memory trial entries belonging to retrieved cases.
    pub retrieved_trials: usize,
    pub retrieved_correct: usize,
    pub beneficial_cases: Vec<String>,
    pub harmful_cases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy_baseline: f64,
    pub accuracy_exp: f64,
    pub delta: f64,
    pub recall: f64,
    /// `None` when no case retrieved any note.
    pub precision: Option<f64>,
    pub beneficial: f64,
    pub harmful: f64,
    pub counts: MetricCounts,
}

fn by_case(log: &RunLog) -> Result<BTreeMap<&str, &RunEntry>, MetricsError> {
    let mut map = BTreeMap::new();
    for e in &log.entries {
        if map.insert(e.case_id.as_str(), e).is_some() {
            return Err(MetricsError::CaseSetMismatch);
        }
    }
    Ok(map)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates T baseline and T with-memory trials over the same cases.
///
/// Beneficial cases are wrong in every baseline trial and right in every
/// with-memory trial; harmful cases the reverse. Accuracies average over
/// all trial entries.
pub fn compute_metrics(baseline: &[RunLog], exp: &[RunLog]) -> Result<MetricsReport, MetricsError> {
    if baseline.is_empty() || exp.is_empty() {
        return Err(MetricsError::Empty);
    }
    if baseline.len() != exp.len() {
        return Err(MetricsError::TrialCountMismatch {
            baseline: baseline.len(),
            exp: exp.len(),
        });
    }
    let base_maps = baseline.iter().map(by_case).collect::<Result<Vec<_>, _>>()?;
    let exp_maps = exp.iter().map(by_case).collect::<Result<Vec<_>, _>>()?;
    let ids: BTreeSet<&str> = base_maps[0].keys().copied().collect();
    for m in base_maps.iter().chain(&exp_maps) {
        if m.len() != ids.len() || !m.keys().all(|k| ids.contains(k)) {
            return Err(MetricsError::CaseSetMismatch);
        }
    }

    let trials = baseline.len();
    let mut c = MetricCounts {
        cases: ids.len(),
        trials,
        ..Default::default()
    };
    for id in &ids {
        let base: Vec<&RunEntry> = base_maps.iter().map(|m| m[id]).collect();
        let ex: Vec<&RunEntry> = exp_maps.iter().map(|m| m[id]).collect();
        let base_hits = base.iter().filter(|e| e.correct).count();
        let exp_hits = ex.iter().filter(|e| e.correct).count();
        c.baseline_correct += base_hits;
        c.exp_correct += exp_hits;
        if ex.iter().any(|e| e.retrieved) {
            c.retrieved_cases += 1;
            c.retrieved_trials += ex.len();
            c.retrieved_correct += exp_hits;
        }
        if base_hits == 0 && exp_hits == trials {
            c.beneficial_cases.push(id.to_string());
        }
        if base_hits == trials && exp_hits == 0 {
            c.harmful_cases.push(id.to_string());
        }
    }

    let entries = c.cases * trials;
    let accuracy_baseline = ratio(c.baseline_correct, entries);
    let accuracy_exp = ratio(c.exp_correct, entries);
    Ok(MetricsReport {
        accuracy_baseline,
        accuracy_exp,
        delta: accuracy_exp - accuracy_baseline,
        recall: ratio(c.retrieved_cases, c.cases),
        precision: (c.retrieved_trials > 0).then(|| ratio(c.retrieved_correct, c.retrieved_trials)),
        beneficial: ratio(c.beneficial_cases.len(), c.cases),
        harmful: ratio(c.harmful_cases.len(), c.cases),
        counts: c,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.1}%", x * 100.0)
}

pub(crate) fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let header = [
        "Configuration",
        "Baseline",
        "w/Exp",
        "Delta",
        "Recall",
        "Precision",
        "Beneficial",
        "Harmful",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.clone(),
                pct(r.accuracy_baseline),
                pct(r.accuracy_exp),
                signed_pct(r.delta),
                pct(r.recall),
                r.precision.map(pct).unwrap_or_else(|| "n/a".into()),
                pct(r.beneficial),
                pct(r.harmful),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header.map(String::from), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&rule, &mut out);
    for row in &body {
        line(row, &mut out);
    }
    out
}

impl MetricsReport {
    /// Aligned plain-text table with one row.
    pub fn to_table(&self, name: &str) -> String {
        render_table(&[(name.to_string(), self)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{RunMeta, RunMode};

    fn log(mode: RunMode, trial: u32, entries: &[(&str, bool, bool)]) -> RunLog {
        RunLog {
            meta: RunMeta {
                mode,
                agent: "test".into(),
                trial,
                config: serde_json::Value::Null,
            },
            entries: entries
                .iter()
                .map(|(id, retrieved, correct)| RunEntry {
                    case_id: id.to_string(),
                    retrieved: *retrieved,
                    note_keys: vec![],
                    diagnosis: Some("x".into()),
                    correct: *correct,
                    failure: None,
                    detail: None,
                })
                .collect(),
        }
    }

    #[test]
    fn four_case_fixture() {
        // baseline correct {c1,c2}; exp retrieved {c2,c3,c4}, correct {c1,c2,c3}
        let b = log(
            RunMode::Baseline,
            0,
            &[("c1", false, true), ("c2", false, true), ("c3", false, false), ("c4", false, false)],
        );
        let e = log(
            RunMode::WithMemory,
            0,
            &[("c1", false, true), ("c2", true, true), ("c3", true, true), ("c4", true, false)],
        );
        let r = compute_metrics(&[b], &[e]).unwrap();
        assert_eq!(r.accuracy_baseline, 0.5);
        assert_eq!(r.accuracy_exp, 0.75);
        assert_eq!(r.delta, 0.25);
        assert_eq!(r.recall, 0.75);
        assert!((r.precision.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.beneficial, 0.25);
        assert_eq!(r.counts.beneficial_cases, ["c3"]);
        assert_eq!(r.harmful, 0.0);
    }

    #[test]
    fn no_retrieval_means_null_precision() {
        let b = log(RunMode::Baseline, 0, &[("c1", false, true)]);
        let e = log(RunMode::WithMemory, 0, &[("c1", false, false)]);
        let r = compute_metrics(&[b], &[e]).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, None);
        assert_eq!(r.harmful, 1.0);
    }

    #[test]
    fn identical_logs_have_zero_effect() {
        let entries = [("c1", false, true), ("c2", false, false)];
        let b = log(RunMode::Baseline, 0, &entries);
        let r = compute_metrics(&[b.clone()], &[b]).unwrap();
        assert_eq!((r.delta, r.beneficial, r.harmful), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mismatches_are_errors() {
        let b = log(RunMode::Baseline, 0, &[("c1", false, true)]);
        let e = log(RunMode::WithMemory, 0, &[("c2", false, true)]);
        assert_eq!(
            compute_metrics(&[b.clone()], &[e]),
            Err(MetricsError::CaseSetMismatch)
        );
        assert_eq!(
            compute_metrics(&[b.clone(), b.clone()], &[b]),
            Err(MetricsError::TrialCountMismatch { baseline: 2, exp: 1 })
        );
    }

    #[test]
    fn table_has_header_rule_and_row() {
        let b = log(RunMode::Baseline, 0, &[("c1", false, true)]);
        let t = compute_metrics(&[b.clone()], &[b]).unwrap().to_table("default");
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Configuration"));
        assert!(lines[2].contains("n/a"));
    }
}
