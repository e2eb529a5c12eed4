mod common;

use std::collections::BTreeSet;

use common::{case, chest_script, confusion};
use expmem_core::agent::ErrorMode;
use expmem_core::construction::{build, ConstructionConfig};
use expmem_core::evaluation::{
    compute_metrics, run_ablation, run_eval, AblationGrid, AblationRow, EvalConfig, MemoryAccess,
    RunEntry, RunLog, RunMeta, RunMode, RunSink,
};
use expmem_core::{CaseRecord, MockAgent, MockEmbedder, RetrievalConfig, Taxonomy};
use proptest::prelude::*;

fn log(mode: RunMode, trial: u32, rows: &[(bool, bool)]) -> RunLog {
    RunLog {
        meta: RunMeta {
            mode,
            agent: "synthetic".into(),
            trial,
            config: serde_json::Value::Null,
        },
        entries: rows
            .iter()
            .enumerate()
            .map(|(i, &(retrieved, correct))| RunEntry {
                case_id: format!("case-{i:03}"),
                retrieved: retrieved && mode == RunMode::WithMemory,
                note_keys: vec![],
                diagnosis: Some("d".into()),
                correct,
                failure: None,
                detail: None,
            })
            .collect(),
    }
}

/// Random paired logs: `trials` baseline and with-memory logs over `n` cases.
fn log_pairs() -> impl Strategy<Value = (Vec<RunLog>, Vec<RunLog>)> {
    (1usize..=60, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(n, t)| {
        let trial = proptest::collection::vec((any::<bool>(), any::<bool>()), n);
        (
            proptest::collection::vec(trial.clone(), t),
            proptest::collection::vec(trial, t),
        )
            .prop_map(|(b, e)| {
                let base = b
                    .iter()
                    .enumerate()
                    .map(|(t, rows)| log(RunMode::Baseline, t as u32, rows))
                    .collect();
                let exp = e
                    .iter()
                    .enumerate()
                    .map(|(t, rows)| log(RunMode::WithMemory, t as u32, rows))
                    .collect();
                (base, exp)
            })
    })
}

proptest! {
    #[test]
    fn counts_match_a_direct_tally((base, exp) in log_pairs()) {
        let r = compute_metrics(&base, &exp).unwrap();
        let n = base[0].entries.len();
        let t = base.len();
        // tally case by case over a flat index, independent of the id maps
        let (mut bc, mut ec, mut retrieved, mut rt, mut rc, mut ben, mut harm) = (0, 0, 0, 0, 0, 0, 0);
        for i in 0..n {
            let b: Vec<bool> = base.iter().map(|l| l.entries[i].correct).collect();
            let e: Vec<bool> = exp.iter().map(|l| l.entries[i].correct).collect();
            bc += b.iter().filter(|x| **x).count();
            ec += e.iter().filter(|x| **x).count();
            if exp.iter().any(|l| l.entries[i].retrieved) {
                retrieved += 1;
                rt += t;
                rc += e.iter().filter(|x| **x).count();
            }
            if b.iter().all(|x| !x) && e.iter().all(|x| *x) { ben += 1; }
            if b.iter().all(|x| *x) && e.iter().all(|x| !x) { harm += 1; }
        }
        let c = &r.counts;
        prop_assert_eq!((c.cases, c.trials), (n, t));
        prop_assert_eq!((c.baseline_correct, c.exp_correct), (bc, ec));
        prop_assert_eq!((c.retrieved_cases, c.retrieved_trials, c.retrieved_correct), (retrieved, rt, rc));
        prop_assert_eq!((c.beneficial_cases.len(), c.harmful_cases.len()), (ben, harm));
        prop_assert_eq!(r.precision.is_none(), retrieved == 0);
        prop_assert_eq!(r.delta, r.accuracy_exp - r.accuracy_baseline);

        let ben_set: BTreeSet<_> = c.beneficial_cases.iter().collect();
        prop_assert!(c.harmful_cases.iter().all(|h| !ben_set.contains(h)));
        prop_assert!(r.beneficial + r.harmful <= 1.0);
    }

    #[test]
    fn single_trial_accuracy_decomposes((base, exp) in log_pairs().prop_filter("T=1", |(b, _)| b.len() == 1)) {
        let r = compute_metrics(&base, &exp).unwrap();
        let nonretrieved_correct = exp[0]
            .entries
            .iter()
            .filter(|e| !e.retrieved && e.correct)
            .count();
        prop_assert_eq!(r.counts.exp_correct, r.counts.retrieved_correct + nonretrieved_correct);
    }
}

struct World {
    agent: MockAgent,
    corpus: Vec<CaseRecord>,
    testset: Vec<CaseRecord>,
}

/// Ten always-confused pairs; the test set adds two pairs never seen in
/// construction and two correctly answered diagnoses.
fn world() -> World {
    let confusions = (0..12)
        .map(|i| confusion(&format!("truth {i}"), &format!("mimic {i}"), ErrorMode::Always))
        .collect();
    let agent = MockAgent::new(chest_script(confusions)).unwrap();
    let corpus = (0..40)
        .map(|i| case(&format!("b{i}"), &format!("truth {}", i % 10)))
        .collect();
    let testset = (0..14)
        .map(|i| case(&format!("t{i}"), &format!("truth {i}")))
        .collect();
    World {
        agent,
        corpus,
        testset,
    }
}

#[test]
fn mock_world_gains_without_harm() {
    let w = world();
    let provider = MockEmbedder::new(64, 5);
    let (store, _) = build(
        Taxonomy::default_taxonomy(),
        &w.corpus,
        &w.agent,
        &provider,
        &ConstructionConfig::default(),
    )
    .unwrap();
    assert_eq!(store.len(), 10);
    let config = EvalConfig::default();
    let sink = RunSink::in_memory();
    let base = run_eval(&w.testset, &w.agent, None, &config, &sink).unwrap();
    let mem = MemoryAccess {
        store: &store,
        provider: &provider,
    };
    let exp = run_eval(&w.testset, &w.agent, Some(mem), &config, &sink).unwrap();
    let r = compute_metrics(&base, &exp).unwrap();
    assert!(r.delta > 0.0);
    assert_eq!(r.harmful, 0.0);
    assert_eq!(r.counts.exp_correct, 12);
    assert_eq!(r.counts.retrieved_cases, 10);
    assert_eq!(r.precision, Some(1.0));
    for e in &exp[0].entries[..10] {
        assert!(e.correct && e.retrieved, "{e:?}");
    }
}

#[test]
fn single_row_grid_matches_plain_evaluation() {
    let w = world();
    let provider = MockEmbedder::new(64, 5);
    let grid = AblationGrid {
        reference_baseline: None,
        rows: vec![AblationRow {
            name: "only".into(),
            rounds: 2,
            tau: None,
            top_k: None,
            max_paths: None,
            cross_department: None,
            reference_accuracy: None,
        }],
    };
    let tax = Taxonomy::default_taxonomy();
    let cfg = ConstructionConfig::default();
    let eval = EvalConfig::default();
    let table = run_ablation(&w.testset, &w.corpus, &tax, &w.agent, &provider, &grid, &cfg, &eval)
        .unwrap();
    let (store, _) = build(tax, &w.corpus, &w.agent, &provider, &cfg).unwrap();
    let sink = RunSink::in_memory();
    let base = run_eval(&w.testset, &w.agent, None, &eval, &sink).unwrap();
    let mem = MemoryAccess {
        store: &store,
        provider: &provider,
    };
    let exp = run_eval(&w.testset, &w.agent, Some(mem), &eval, &sink).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].report, compute_metrics(&base, &exp).unwrap());
    assert_eq!(table.to_table().lines().count(), 3);
}

#[test]
fn recall_is_non_increasing_in_tau() {
    // dataset candidates pair the truth with curated alternatives, giving a
    // spread of similarity scores instead of only exact pair matches
    let w = world();
    let testset: Vec<CaseRecord> = w
        .testset
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.curated_differentials = std::iter::once(c.ground_truth.clone())
                .chain((0..5).map(|j| common::label(&format!("mimic {}", (j * 5 + c.id.len()) % 12))))
                .collect();
            c
        })
        .collect();
    let provider = MockEmbedder::new(8, 9);
    let rows = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 1.0]
        .iter()
        .map(|&tau| AblationRow {
            name: format!("tau={tau}"),
            rounds: 2,
            tau: Some(tau),
            top_k: None,
            max_paths: None,
            cross_department: None,
            reference_accuracy: None,
        })
        .collect();
    let grid = AblationGrid {
        reference_baseline: None,
        rows,
    };
    let eval = EvalConfig {
        candidates: expmem_core::CandidateSource::Dataset,
        retrieval: RetrievalConfig::default(),
        ..Default::default()
    };
    let table = run_ablation(
        &testset,
        &w.corpus,
        &Taxonomy::default_taxonomy(),
        &w.agent,
        &provider,
        &grid,
        &ConstructionConfig::default(),
        &eval,
    )
    .unwrap();
    let recalls: Vec<f64> = table.rows.iter().map(|r| r.report.recall).collect();
    assert!(recalls.windows(2).all(|w| w[0] >= w[1]), "{recalls:?}");
    assert!(recalls[0] > 0.0);
}
