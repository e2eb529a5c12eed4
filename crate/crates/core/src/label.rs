//! Diagnosis labels and the order-insensitive differential pair key.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("diagnosis label is empty")]
    Empty,
    #[error("degenerate differential pair: '{0}' and '{1}' are the same diagnosis")]
    EqualLabels(String, String),
}

/// Lowercases and collapses all runs of whitespace to a single space.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A free-text disease name.
///
/// Equality, ordering and hashing use the normalized form, so
/// `"  Lymphoma "` and `"LYMPHOMA"` are the same diagnosis. The trimmed
/// original text is kept for display.
#[derive(Clone)]
pub struct DiagnosisLabel {
    text: String,
    normalized: String,
}

impl DiagnosisLabel {
    pub fn new(text: impl AsRef<str>) -> Result<Self, LabelError> {
        let text = text.as_ref().trim();
        let normalized = normalize(text);
        if normalized.is_empty() {
            return Err(LabelError::Empty);
        }
        Ok(Self {
            text: text.to_string(),
            normalized,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn normalized(&self) -> &str {
        &self.normalized
    }

    /// Grading rule for free-text diagnoses: normalized exact match.
    pub fn matches(&self, other: &DiagnosisLabel) -> bool {
        self.normalized == other.normalized
    }
}

impl PartialEq for DiagnosisLabel {
    fn eq(&self, other: &Self) -> bool {
        self.normalized == other.normalized
    }
}

impl Eq for DiagnosisLabel {}

impl Hash for DiagnosisLabel {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.normalized.hash(state);
    }
}

impl PartialOrd for DiagnosisLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DiagnosisLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.normalized.cmp(&other.normalized)
    }
}

impl fmt::Debug for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.text)
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl TryFrom<&str> for DiagnosisLabel {
    type Error = LabelError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl Serialize for DiagnosisLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for DiagnosisLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        DiagnosisLabel::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Canonical identifier of a differential pair, rendered as `"A vs. B"`.
///
/// The two labels are stored sorted by normalized form, so the key does not
/// depend on argument order. A key with equal labels can only come from
/// deserializing untrusted data; [`PairKey::is_degenerate`] reports it and
/// note validation rejects it.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    first: DiagnosisLabel,
    second: DiagnosisLabel,
    display: String,
}

impl PairKey {
    fn from_sorted(a: DiagnosisLabel, b: DiagnosisLabel) -> Self {
        let (first, second) = if b < a { (b, a) } else { (a, b) };
        let display = format!("{} vs. {}", first.text, second.text);
        Self {
            first,
            second,
            display,
        }
    }

    pub fn first(&self) -> &DiagnosisLabel {
        &self.first
    }

    pub fn second(&self) -> &DiagnosisLabel {
        &self.second
    }

    pub fn display(&self) -> &str {
        &self.display
    }

    pub fn labels(&self) -> [&DiagnosisLabel; 2] {
        [&self.first, &self.second]
    }

    pub fn contains(&self, label: &DiagnosisLabel) -> bool {
        &self.first == label || &self.second == label
    }

    pub fn is_degenerate(&self) -> bool {
        self.first == self.second
    }
}

/// Builds the order-insensitive key for a pair of distinct diagnoses.
pub fn canonical_pair_key(a: &DiagnosisLabel, b: &DiagnosisLabel) -> Result<PairKey, LabelError> {
    if a == b {
        return Err(LabelError::EqualLabels(a.text.clone(), b.text.clone()));
    }
    Ok(PairKey::from_sorted(a.clone(), b.clone()))
}

impl fmt::Debug for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PairKey({:?})", self.display)
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display)
    }
}

impl Serialize for PairKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [&self.first, &self.second].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PairKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [a, b] = <[DiagnosisLabel; 2]>::deserialize(deserializer)?;
        Ok(PairKey::from_sorted(a, b))
    }
}
