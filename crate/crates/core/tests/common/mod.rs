//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use expmem_core::agent::{ConfusionEntry, ErrorMode, MockAgentScript, Route};
use expmem_core::{CaseRecord, DiagnosisLabel};

pub fn label(s: &str) -> DiagnosisLabel {
    DiagnosisLabel::new(s).unwrap()
}

pub fn case(id: &str, truth: &str) -> CaseRecord {
    CaseRecord {
        id: id.into(),
        clinical_history: format!("Clinical history for {id}"),
        image_refs: vec![format!("images/{id}.png")],
        ground_truth: label(truth),
        curated_differentials: vec![],
        discussion: format!("Expert discussion of {truth}"),
        published_year: None,
    }
}

pub fn confusion(truth: &str, distractor: &str, mode: ErrorMode) -> ConfusionEntry {
    ConfusionEntry {
        truth: label(truth),
        distractor: label(distractor),
        mode,
        note_blind: false,
    }
}

pub fn route(truth: &str, dept: &str, organ: &str) -> Route {
    Route {
        label: label(truth),
        paths: vec![(dept.into(), organ.into())],
    }
}

/// Script where every listed truth is routed to chest/pleura.
pub fn chest_script(confusions: Vec<ConfusionEntry>) -> MockAgentScript {
    MockAgentScript {
        routes: confusions
            .iter()
            .map(|c| route(c.truth.text(), "chest", "pleura"))
            .collect(),
        confusion_table: confusions,
        ..Default::default()
    }
}
