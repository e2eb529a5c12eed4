//! Two-level department → organ/region hierarchy used to scope memory.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::sha256_hex;
use crate::label::normalize;

/// Catch-all organ entry every department must end with.
pub const OTHERS: &str = "others";

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.json");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy has no departments")]
    Empty,
    #[error("duplicate department '{0}'")]
    DuplicateDepartment(String),
    #[error("duplicate organ '{organ}' in department '{department}'")]
    DuplicateOrgan { department: String, organ: String },
    #[error("department '{0}' must list \"others\" as its last organ")]
    MissingOthers(String),
    #[error("blank department or organ name")]
    BlankName,
    #[error("cannot read taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed taxonomy document: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Department {
    pub name: String,
    pub organs: Vec<String>,
}

/// A (department, organ/region) location in the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnatomicalPath {
    pub department: String,
    pub organ: String,
}

impl AnatomicalPath {
    pub fn new(department: impl Into<String>, organ: impl Into<String>) -> Self {
        Self {
            department: department.into(),
            organ: organ.into(),
        }
    }
}

impl fmt::Display for AnatomicalPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.department, self.organ)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    departments: Vec<Department>,
}

#[derive(Deserialize)]
struct TaxonomyDocument {
    departments: Vec<Department>,
}

impl<'de> Deserialize<'de> for Taxonomy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = TaxonomyDocument::deserialize(deserializer)?;
        Taxonomy::new(doc.departments).map_err(serde::de::Error::custom)
    }
}

impl Taxonomy {
    pub fn new(departments: Vec<Department>) -> Result<Self, TaxonomyError> {
        if departments.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut seen = HashSet::new();
        for dept in &departments {
            if dept.name.trim().is_empty() {
                return Err(TaxonomyError::BlankName);
            }
            if !seen.insert(dept.name.as_str()) {
                return Err(TaxonomyError::DuplicateDepartment(dept.name.clone()));
            }
            if dept.organs.last().map(String::as_str) != Some(OTHERS) {
                return Err(TaxonomyError::MissingOthers(dept.name.clone()));
            }
            let mut organs = HashSet::new();
            for organ in &dept.organs {
                if organ.trim().is_empty() {
                    return Err(TaxonomyError::BlankName);
                }
                if !organs.insert(organ.as_str()) {
                    return Err(TaxonomyError::DuplicateOrgan {
                        department: dept.name.clone(),
                        organ: organ.clone(),
                    });
                }
            }
        }
        Ok(Self { departments })
    }

    /// The shipped 11-department / 118-organ taxonomy.
    pub fn default_taxonomy() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn departments(&self) -> &[Department] {
        &self.departments
    }

    pub fn organ_count(&self) -> usize {
        self.departments.iter().map(|d| d.organs.len()).sum()
    }

    pub fn department(&self, name: &str) -> Option<&Department> {
        self.departments.iter().find(|d| d.name == name)
    }

    pub fn contains(&self, path: &AnatomicalPath) -> bool {
        self.department(&path.department)
            .is_some_and(|d| d.organs.iter().any(|o| *o == path.organ))
    }

    /// Case- and whitespace-insensitive department lookup returning the
    /// canonical name.
    pub fn resolve_department(&self, name: &str) -> Option<&str> {
        let wanted = normalize(name);
        self.departments
            .iter()
            .find(|d| normalize(&d.name) == wanted)
            .map(|d| d.name.as_str())
    }

    pub fn resolve_organ(&self, department: &str, organ: &str) -> Option<&str> {
        let wanted = normalize(organ);
        self.department(department)?
            .organs
            .iter()
            .find(|o| normalize(o) == wanted)
            .map(String::as_str)
    }

    /// Every path in taxonomy order.
    pub fn paths(&self) -> impl Iterator<Item = AnatomicalPath> + '_ {
        self.departments.iter().flat_map(|d| {
            d.organs
                .iter()
                .map(move |o| AnatomicalPath::new(d.name.clone(), o.clone()))
        })
    }

    pub fn checksum(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("taxonomy serializes").as_bytes())
    }
}
