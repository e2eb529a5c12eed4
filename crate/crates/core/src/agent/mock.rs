//! Scripted, deterministic agent used for tests and desk-scale runs.
//!
//! The script lists which ground truths the agent confuses with which
//! distractor, how often, and where each diagnosis lives in the taxonomy.
//! A retained note whose pair is exactly (truth, distractor) makes the
//! agent answer correctly unless the entry is marked `note_blind`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    AgentError, AgentGateway, Attempt, Diagnosis, ExtractionRequest, NoteDraft, PathProposal,
    Relevance,
};
use crate::corpus::CaseRecord;
use crate::label::{canonical_pair_key, DiagnosisLabel, PairKey};
use crate::note::ExperienceNote;
use crate::retrieval::RetrievedNote;
use crate::taxonomy::{AnatomicalPath, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    Always,
    Probability(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionEntry {
    pub truth: DiagnosisLabel,
    pub distractor: DiagnosisLabel,
    pub mode: ErrorMode,
    /// The agent keeps erring even when the matching note is retained.
    #[serde(default)]
    pub note_blind: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub label: DiagnosisLabel,
    pub paths: Vec<(String, String)>,
}

/// A note that flips a case with `truth` to `answer` whenever retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisleadingRule {
    pub pair: PairKey,
    pub truth: DiagnosisLabel,
    pub answer: DiagnosisLabel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockAgentScript {
    pub identity: Option<String>,
    pub stochastic_seed: u64,
    pub confusion_table: Vec<ConfusionEntry>,
    pub routes: Vec<Route>,
    pub default_path: Option<(String, String)>,
    pub misleading: Vec<MisleadingRule>,
    /// Case ids whose extraction responses are always unusable.
    pub extraction_failures: Vec<String>,
}

impl MockAgentScript {
    pub fn validate(&self) -> Result<(), String> {
        for entry in &self.confusion_table {
            if let ErrorMode::Probability(p) = entry.mode {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!(
                        "error probability for '{}' must lie in [0, 1], got {p}",
                        entry.truth
                    ));
                }
            }
            if entry.truth == entry.distractor {
                return Err(format!("distractor of '{}' equals the truth", entry.truth));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read mock script {}: {e}", path.display()))?;
        let script: Self = serde_json::from_str(&text)
            .map_err(|e| format!("malformed mock script {}: {e}", path.display()))?;
        script.validate()?;
        Ok(script)
    }
}

#[derive(Debug, Clone)]
pub struct MockAgent {
    script: MockAgentScript,
    confusions: BTreeMap<DiagnosisLabel, ConfusionEntry>,
}

impl MockAgent {
    pub fn new(script: MockAgentScript) -> Result<Self, String> {
        script.validate()?;
        let confusions = script
            .confusion_table
            .iter()
            .map(|e| (e.truth.clone(), e.clone()))
            .collect();
        Ok(Self { script, confusions })
    }

    /// An agent that always answers correctly.
    pub fn perfect() -> Self {
        Self::new(MockAgentScript::default()).expect("empty script is valid")
    }

    pub fn script(&self) -> &MockAgentScript {
        &self.script
    }

    /// Uniform draw in [0, 1) keyed by (seed, case id, attempt).
    fn draw(&self, case_id: &str, attempt: Attempt) -> f64 {
        let mut h = Sha256::new();
        h.update(self.script.stochastic_seed.to_le_bytes());
        h.update((case_id.len() as u64).to_le_bytes());
        h.update(case_id.as_bytes());
        h.update(attempt.index().to_le_bytes());
        let digest = h.finalize();
        let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        (bits >> 11) as f64 / (1u64 << 53) as f64
    }

    fn answer(&self, case: &CaseRecord, notes: &[RetrievedNote], attempt: Attempt) -> DiagnosisLabel {
        let truth = &case.ground_truth;
        let entry = self.confusions.get(truth);
        let retained = || notes.iter().filter(|n| n.retained_after_filter);

        if let Some(entry) = entry {
            if !entry.note_blind {
                let key = canonical_pair_key(truth, &entry.distractor).expect("validated distinct");
                if retained().any(|n| n.note.differentials == key) {
                    return truth.clone();
                }
            }
        }
        for rule in &self.script.misleading {
            if rule.truth == *truth && retained().any(|n| n.note.differentials == rule.pair) {
                return rule.answer.clone();
            }
        }
        match entry {
            Some(e) => {
                let errs = match e.mode {
                    ErrorMode::Always => true,
                    ErrorMode::Probability(p) => self.draw(&case.id, attempt) < p,
                };
                if errs {
                    e.distractor.clone()
                } else {
                    truth.clone()
                }
            }
            None => truth.clone(),
        }
    }
}

impl AgentGateway for MockAgent {
    fn identity(&self) -> String {
        self.script
            .identity
            .clone()
            .unwrap_or_else(|| "mock-agent".to_string())
    }

    fn diagnose(
        &self,
        case: &CaseRecord,
        notes: &[RetrievedNote],
        attempt: Attempt,
    ) -> Result<Diagnosis, AgentError> {
        let label = self.answer(case, notes, attempt);
        let rationale = format!("scripted answer with {} retained notes", notes.len());
        Ok(Diagnosis {
            raw_response: format!("{rationale}\nFINAL DIAGNOSIS: {label}"),
            label,
            rationale,
        })
    }

    fn propose_candidates(&self, case: &CaseRecord) -> Result<Vec<DiagnosisLabel>, AgentError> {
        let truth = case.ground_truth.clone();
        Ok(match self.confusions.get(&truth) {
            Some(e) => vec![truth, e.distractor.clone()],
            None => std::iter::once(truth)
                .chain(case.curated_differentials.iter().cloned())
                .collect(),
        })
    }

    fn select_paths(
        &self,
        case: &CaseRecord,
        _taxonomy: &Taxonomy,
    ) -> Result<Vec<PathProposal>, AgentError> {
        let routed = self
            .script
            .routes
            .iter()
            .find(|r| r.label == case.ground_truth)
            .map(|r| r.paths.clone())
            .or_else(|| self.script.default_path.clone().map(|p| vec![p]))
            .unwrap_or_default();
        Ok(routed
            .into_iter()
            .map(|(department, organ)| PathProposal { department, organ })
            .collect())
    }

    fn extract_note(
        &self,
        request: &ExtractionRequest<'_>,
        _feedback: Option<&str>,
    ) -> Result<NoteDraft, AgentError> {
        if self.script.extraction_failures.contains(&request.case.id) {
            return Err(AgentError::MalformedResponse(
                "scripted unparsable response".into(),
            ));
        }
        let (wrong, truth) = (request.wrong.text(), request.truth.text());
        Ok(NoteDraft {
            confusions: vec![format!(
                "{wrong} and {truth} share overlapping imaging and clinical features"
            )],
            discriminators: BTreeMap::from([
                (
                    truth.to_string(),
                    format!("Findings documented by experts for {truth}"),
                ),
                (
                    wrong.to_string(),
                    format!("Hallmark findings of {wrong}, absent in the missed presentation"),
                ),
            ]),
            decision_rule: vec![
                format!("If the documented findings of {truth} are present → favor {truth}"),
                format!("If the hallmark findings of {wrong} are absent → exclude {wrong}"),
                format!("If the hallmark findings of {wrong} are present → favor {wrong}"),
                "If neither pattern fits → consider others".to_string(),
            ],
            error_analysis: vec![format!(
                "case {}: answered {wrong} instead of {truth}",
                request.case.id
            )],
        })
    }

    fn score_relevance(
        &self,
        _case: &CaseRecord,
        note: &ExperienceNote,
        selected: &[AnatomicalPath],
    ) -> Relevance {
        if selected.iter().any(|p| *p == note.path()) {
            Relevance::Relevant
        } else if selected.iter().all(|p| p.department != note.department) {
            Relevance::Irrelevant
        } else {
            Relevance::Unknown
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{self, diagnose};
    use crate::note::fixtures::note;

    fn label(s: &str) -> DiagnosisLabel {
        DiagnosisLabel::new(s).unwrap()
    }

    fn case(id: &str, truth: &str) -> CaseRecord {
        CaseRecord {
            id: id.into(),
            clinical_history: "Fetal ultrasound: Dandy-Walker malformation, cystic kidneys".into(),
            image_refs: vec!["us/1.png".into()],
            ground_truth: label(truth),
            curated_differentials: vec![],
            discussion: "no polydactyly, no encephalocele".into(),
            published_year: Some(2025),
        }
    }

    fn fig_script() -> MockAgentScript {
        MockAgentScript {
            confusion_table: vec![ConfusionEntry {
                truth: label("Goldston syndrome"),
                distractor: label("Meckel–Gruber syndrome"),
                mode: ErrorMode::Always,
                note_blind: false,
            }],
            routes: vec![Route {
                label: label("Goldston syndrome"),
                paths: vec![("paediatric".into(), "fetal imaging".into())],
            }],
            ..Default::default()
        }
    }

    fn retrieved(n: ExperienceNote) -> RetrievedNote {
        RetrievedNote {
            matched_query_pair: n.differentials.clone(),
            note: n,
            similarity: 1.0,
            retained_after_filter: true,
        }
    }

    #[test]
    fn confuses_without_notes_and_corrects_with_matching_note() {
        let agent = MockAgent::new(fig_script()).unwrap();
        let c = case("fig", "Goldston syndrome");
        let d = diagnose(&agent, &c, &[], Attempt::Eval { trial: 0 }).unwrap();
        assert_eq!(d.label.text(), "Meckel–Gruber syndrome");

        let n = note(
            "paediatric",
            "fetal imaging",
            "Goldston syndrome",
            "Meckel–Gruber syndrome",
        );
        let d = diagnose(&agent, &c, &[retrieved(n)], Attempt::Eval { trial: 0 }).unwrap();
        assert_eq!(d.label.text(), "Goldston syndrome");
    }

    #[test]
    fn filtered_notes_do_not_correct() {
        let agent = MockAgent::new(fig_script()).unwrap();
        let c = case("fig", "Goldston syndrome");
        let mut r = retrieved(note(
            "paediatric",
            "fetal imaging",
            "Goldston syndrome",
            "Meckel–Gruber syndrome",
        ));
        r.retained_after_filter = false;
        let d = diagnose(&agent, &c, &[r], Attempt::Phase2).unwrap();
        assert_eq!(d.label.text(), "Meckel–Gruber syndrome");
    }

    #[test]
    fn unscripted_truth_is_answered_correctly() {
        let agent = MockAgent::new(fig_script()).unwrap();
        let d = diagnose(&agent, &case("x", "Sarcoidosis"), &[], Attempt::Phase1).unwrap();
        assert_eq!(d.label, label("sarcoidosis"));
    }

    #[test]
    fn candidates_are_truth_and_distractor() {
        let agent = MockAgent::new(fig_script()).unwrap();
        assert_eq!(
            agent.propose_candidates(&case("x", "Goldston syndrome")).unwrap(),
            [label("Goldston syndrome"), label("Meckel–Gruber syndrome")]
        );
    }

    #[test]
    fn stochastic_mode_is_reproducible_and_roughly_calibrated() {
        let mut script = fig_script();
        script.confusion_table[0].mode = ErrorMode::Probability(0.5);
        script.stochastic_seed = 11;
        let agent = MockAgent::new(script).unwrap();
        let mut errors = 0;
        for i in 0..400 {
            let c = case(&format!("c{i}"), "Goldston syndrome");
            let a = agent.answer(&c, &[], Attempt::Phase1);
            assert_eq!(a, agent.answer(&c, &[], Attempt::Phase1));
            if a.text() != "Goldston syndrome" {
                errors += 1;
            }
        }
        assert!((150..250).contains(&errors), "{errors}");
    }

    #[test]
    fn probability_bounds_are_validated() {
        let mut script = fig_script();
        script.confusion_table[0].mode = ErrorMode::Probability(1.5);
        assert!(MockAgent::new(script).is_err());
    }

    #[test]
    fn template_note_is_valid() {
        let agent = MockAgent::perfect();
        let c = case("c7", "Y");
        let path = AnatomicalPath::new("chest", "pleura");
        let note = agent::extract_note(
            &agent,
            &ExtractionRequest {
                case: &c,
                wrong: &label("X"),
                truth: &label("Y"),
                path: &path,
                tag: crate::note::PhaseTag::Phase1,
            },
            &Taxonomy::default_taxonomy(),
        )
        .unwrap();
        assert_eq!(note.differentials.display(), "X vs. Y");
        assert_eq!(note.confusions.len(), 1);
    }

    #[test]
    fn relevance_rules() {
        let agent = MockAgent::perfect();
        let c = case("c", "Y");
        let selected = [AnatomicalPath::new("chest", "pleura")];
        let rel = |n: &ExperienceNote| agent.score_relevance(&c, n, &selected);
        assert_eq!(rel(&note("chest", "pleura", "A", "B")), Relevance::Relevant);
        assert_eq!(rel(&note("abdominal", "liver", "A", "B")), Relevance::Irrelevant);
        assert_eq!(rel(&note("chest", "hilum", "A", "B")), Relevance::Unknown);
    }

    #[test]
    fn script_json_shape() {
        let json = r#"{
            "stochastic_seed": 3,
            "confusion_table": [
                {"truth": "A", "distractor": "B", "mode": "always"},
                {"truth": "C", "distractor": "D", "mode": {"probability": 0.25}, "note_blind": true}
            ],
            "routes": [{"label": "A", "paths": [["chest", "pleura"]]}],
            "default_path": ["chest", "others"],
            "misleading": [{"pair": ["E", "F"], "truth": "E", "answer": "F"}]
        }"#;
        let script: MockAgentScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.confusion_table[1].mode, ErrorMode::Probability(0.25));
        assert!(serde_json::from_str::<MockAgentScript>(r#"{"bogus": 1}"#).is_err());
    }
}
