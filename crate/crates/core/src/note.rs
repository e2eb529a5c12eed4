//! Pairwise differential experience notes: schema, validation and merge.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{normalize, PairKey};
use crate::taxonomy::{AnatomicalPath, Taxonomy};

/// Prefix placed before incoming discriminator text appended during a merge.
pub const SUPPLEMENT_MARKER: &str = "Supplement:";

/// Which construction step produced or touched a note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseTag {
    #[serde(rename = "phase1")]
    Phase1,
    #[serde(rename = "phase2-supplement")]
    Phase2Supplement,
    #[serde(rename = "phase2-misleading")]
    Phase2Misleading,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub phase: PhaseTag,
}

impl Provenance {
    pub fn new(case_id: impl Into<String>, phase: PhaseTag) -> Self {
        Self {
            case_id: case_id.into(),
            phase,
        }
    }
}

/// One unit of differential experience for a pair of confusable diagnoses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceNote {
    pub department: String,
    pub organ_region: String,
    pub differentials: PairKey,
    /// Why the two diagnoses get confused.
    pub confusions: Vec<String>,
    /// Findings favouring each diagnosis, keyed by label text.
    pub discriminators: BTreeMap<String, String>,
    /// Conditional rules of the form `If <condition> → <favor|exclude|consider> <target>`.
    pub decision_rule: Vec<String>,
    #[serde(default)]
    pub error_analysis: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl ExperienceNote {
    pub fn path(&self) -> AnatomicalPath {
        AnatomicalPath::new(self.department.clone(), self.organ_region.clone())
    }

    /// Discriminator text for the given label, matched on normalized form.
    pub fn discriminator_for(&self, label: &str) -> Option<&str> {
        let wanted = normalize(label);
        self.discriminators
            .iter()
            .find(|(k, _)| normalize(k) == wanted)
            .map(|(_, v)| v.as_str())
    }
}

/// Verb of a decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleVerb {
    Favor,
    Exclude,
    Consider,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRule<'a> {
    pub condition: &'a str,
    pub verb: RuleVerb,
    pub target: &'a str,
}

fn rule_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"(?is)^\s*if\s+(.+?)\s*(?:→|->|=>)\s*(favou?r|exclude|consider)\s+(.+?)\s*$")
            .expect("rule pattern compiles")
    })
}

/// Pattern-level check of a decision rule; the condition is never interpreted.
pub fn parse_rule(rule: &str) -> Option<ParsedRule<'_>> {
    let caps = rule_pattern().captures(rule)?;
    let verb = match caps.get(2)?.as_str().to_lowercase().as_str() {
        "favor" | "favour" => RuleVerb::Favor,
        "exclude" => RuleVerb::Exclude,
        _ => RuleVerb::Consider,
    };
    Some(ParsedRule {
        condition: caps.get(1)?.as_str(),
        verb,
        target: caps.get(3)?.as_str(),
    })
}

/// Returns every schema violation of `note`; an empty list means valid.
pub fn validate_note(note: &ExperienceNote, taxonomy: &Taxonomy) -> Vec<String> {
    let mut violations = Vec::new();

    match taxonomy.department(&note.department) {
        None => violations.push(format!("unknown department '{}'", note.department)),
        Some(dept) => {
            if !dept.organs.iter().any(|o| *o == note.organ_region) {
                violations.push(format!(
                    "unknown organ/region '{}' in department '{}'",
                    note.organ_region, note.department
                ));
            }
        }
    }

    let pair = &note.differentials;
    if pair.is_degenerate() {
        violations.push(format!(
            "differentials must name two distinct diagnoses, got '{}'",
            pair.display()
        ));
    }

    if note.confusions.is_empty() {
        violations.push("confusions must not be empty".into());
    } else if note.confusions.iter().any(|c| c.trim().is_empty()) {
        violations.push("confusions must not contain blank entries".into());
    }

    let covered: Vec<_> = pair
        .labels()
        .iter()
        .map(|l| note.discriminator_for(l.text()))
        .collect();
    if note.discriminators.len() != 2 || covered.iter().any(Option::is_none) {
        violations.push("discriminators must cover both labels".into());
    }
    if covered.iter().flatten().any(|text| text.trim().is_empty()) {
        violations.push("discriminator text must not be empty".into());
    }

    if note.decision_rule.is_empty() {
        violations.push("decision_rule must not be empty".into());
    } else {
        let mut targets = Vec::new();
        for rule in &note.decision_rule {
            match parse_rule(rule) {
                Some(parsed) => targets.push(normalize(parsed.target)),
                None => violations.push(format!("malformed decision rule '{rule}'")),
            }
        }
        for label in pair.labels() {
            if !targets.iter().any(|t| t.contains(label.normalized())) {
                violations.push(format!("decision_rule never targets '{}'", label.text()));
            }
        }
    }

    if note.provenance.is_empty() {
        violations.push("provenance must not be empty".into());
    }

    violations
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot merge notes at different locations: {existing} vs {incoming}")]
pub struct TripleMismatch {
    pub existing: String,
    pub incoming: String,
}

fn union_into<T: Clone + Eq + std::hash::Hash>(existing: &mut Vec<T>, incoming: &[T]) {
    let mut seen: HashSet<T> = existing.iter().cloned().collect();
    for item in incoming {
        if seen.insert(item.clone()) {
            existing.push(item.clone());
        }
    }
}

fn triple(note: &ExperienceNote) -> String {
    format!(
        "{}/{}/{}",
        note.department,
        note.organ_region,
        note.differentials.display()
    )
}

/// Folds `incoming` into `existing`.
///
/// List fields become order-preserving deduplicated unions with existing
/// entries first. Discriminator text is kept and the incoming text appended
/// after a supplement marker unless it is already contained verbatim.
pub fn merge_notes(
    existing: &ExperienceNote,
    incoming: &ExperienceNote,
) -> Result<ExperienceNote, TripleMismatch> {
    if existing.department != incoming.department
        || existing.organ_region != incoming.organ_region
        || existing.differentials != incoming.differentials
    {
        return Err(TripleMismatch {
            existing: triple(existing),
            incoming: triple(incoming),
        });
    }

    let mut merged = existing.clone();
    union_into(&mut merged.confusions, &incoming.confusions);
    union_into(&mut merged.decision_rule, &incoming.decision_rule);
    union_into(&mut merged.error_analysis, &incoming.error_analysis);
    union_into(&mut merged.provenance, &incoming.provenance);

    for (label, text) in merged.discriminators.iter_mut() {
        let Some(extra) = incoming.discriminator_for(label) else {
            continue;
        };
        let extra = extra.trim();
        if !extra.is_empty() && !text.contains(extra) {
            text.push_str(&format!("\n{SUPPLEMENT_MARKER} {extra}"));
        }
    }

    Ok(merged)
}


#[cfg(test)]
mod tests {
    use super::fixtures::note;
    use super::*;

    fn tax() -> Taxonomy {
        Taxonomy::default_taxonomy()
    }

    #[test]
    fn well_formed_note_is_valid() {
        let n = note("neuroradiology", "brain parenchyma", "Lymphoma", "Metastasis");
        assert!(validate_note(&n, &tax()).is_empty());
    }

    #[test]
    fn unknown_department_is_reported() {
        let n = note("Cardiology", "others", "Lymphoma", "Metastasis");
        let v = validate_note(&n, &tax());
        assert!(v.iter().any(|m| m.starts_with("unknown department")), "{v:?}");
    }

    #[test]
    fn missing_discriminator_side_is_reported() {
        let mut n = note("neuroradiology", "others", "Lymphoma", "Metastasis");
        n.discriminators.remove("Metastasis");
        let v = validate_note(&n, &tax());
        assert!(v.contains(&"discriminators must cover both labels".to_string()), "{v:?}");
    }

    #[test]
    fn rules_must_cover_both_labels_and_match_grammar() {
        let mut n = note("chest", "pleura", "Empyema", "Lung abscess");
        n.decision_rule = vec![
            "If split pleura sign → favor Empyema".into(),
            "lung abscess is round".into(),
        ];
        let v = validate_note(&n, &tax());
        assert!(v.iter().any(|m| m.starts_with("malformed decision rule")));
        assert!(v.iter().any(|m| m.contains("never targets 'Lung abscess'")));
    }

    #[test]
    fn rule_grammar_accepts_ascii_arrow_and_british_spelling() {
        let r = parse_rule("If no polydactyly -> favour Goldston syndrome").unwrap();
        assert_eq!(r.verb, RuleVerb::Favor);
        assert_eq!(r.target, "Goldston syndrome");
        assert_eq!(parse_rule("If Z → consider others").unwrap().verb, RuleVerb::Consider);
        assert!(parse_rule("favor A").is_none());
    }

    #[test]
    fn merge_with_itself_is_identity() {
        let n = note("chest", "pleura", "Empyema", "Lung abscess");
        assert_eq!(merge_notes(&n, &n).unwrap(), n);
    }

    #[test]
    fn merge_unions_lists_existing_first() {
        let mut a = note("chest", "pleura", "Empyema", "Lung abscess");
        a.confusions = vec!["c1".into(), "c2".into()];
        let mut b = a.clone();
        b.confusions = vec!["c3".into()];
        b.error_analysis = vec!["anchored on a shared finding".into(), "ignored history".into()];
        b.provenance = vec![Provenance::new("c9", PhaseTag::Phase2Supplement)];

        let m = merge_notes(&a, &b).unwrap();
        // hand-computed ordered unions
        assert_eq!(m.confusions, vec!["c1", "c2", "c3"]);
        assert_eq!(
            m.error_analysis,
            vec!["anchored on a shared finding", "ignored history"]
        );
        assert_eq!(
            m.provenance,
            vec![
                Provenance::new("c0", PhaseTag::Phase1),
                Provenance::new("c9", PhaseTag::Phase2Supplement)
            ]
        );
    }

    #[test]
    fn merge_appends_new_discriminator_text_once() {
        let a = note("chest", "pleura", "Empyema", "Lung abscess");
        let mut b = a.clone();
        b.discriminators
            .insert("Empyema".into(), "lenticular shape".into());
        let once = merge_notes(&a, &b).unwrap();
        assert_eq!(
            once.discriminator_for("empyema").unwrap(),
            "findings typical of Empyema\nSupplement: lenticular shape"
        );
        assert_eq!(merge_notes(&once, &b).unwrap(), once);
        assert_eq!(
            once.discriminator_for("Lung abscess"),
            a.discriminator_for("Lung abscess")
        );
    }

    #[test]
    fn merge_across_pairs_fails() {
        let a = note("chest", "pleura", "Empyema", "Lung abscess");
        let b = note("chest", "pleura", "Empyema", "Pleural effusion");
        assert!(merge_notes(&a, &b).is_err());
    }
}
