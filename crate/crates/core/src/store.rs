//! Hierarchical experience memory: department → organ/region → pair → note.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::sha256_hex;
use crate::label::PairKey;
use crate::note::{merge_notes, validate_note, ExperienceNote, TripleMismatch};
use crate::taxonomy::{AnatomicalPath, Taxonomy};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid note {key}: {}", violations.join("; "))]
    InvalidNote { key: String, violations: Vec<String> },
    #[error("unknown taxonomy path {0}")]
    UnknownPath(AnatomicalPath),
    #[error(transparent)]
    TripleMismatch(#[from] TripleMismatch),
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    CorruptStore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationOutcome {
    Inserted,
    Merged,
}

type PairIndex = BTreeMap<PairKey, ExperienceNote>;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    taxonomy: Taxonomy,
    index: BTreeMap<String, BTreeMap<String, PairIndex>>,
    version: u64,
}

/// On-disk form of a store.
#[derive(Debug, Serialize, Deserialize)]
pub struct StoreDocument {
    pub taxonomy_checksum: String,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
    pub notes: Vec<ExperienceNote>,
    /// SHA-256 over the serialized `notes` array.
    pub checksum: String,
}

fn notes_checksum(notes: &[ExperienceNote]) -> String {
    sha256_hex(
        serde_json::to_string(notes)
            .expect("notes serialize")
            .as_bytes(),
    )
}

impl MemoryStore {
    pub fn new(taxonomy: Taxonomy) -> Self {
        Self {
            taxonomy,
            index: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.index
            .values()
            .flat_map(BTreeMap::values)
            .map(BTreeMap::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All notes in (department, organ, pair display) order.
    pub fn notes(&self) -> Vec<&ExperienceNote> {
        let mut all: Vec<_> = self
            .index
            .values()
            .flat_map(BTreeMap::values)
            .flat_map(BTreeMap::values)
            .collect();
        sort_canonical(&mut all);
        all
    }

    pub fn get(&self, path: &AnatomicalPath, key: &PairKey) -> Option<&ExperienceNote> {
        self.index.get(&path.department)?.get(&path.organ)?.get(key)
    }

    pub fn insert_or_merge(&mut self, note: ExperienceNote) -> Result<MutationOutcome, StoreError> {
        let violations = validate_note(&note, &self.taxonomy);
        if !violations.is_empty() {
            return Err(StoreError::InvalidNote {
                key: note.differentials.display().to_string(),
                violations,
            });
        }
        let slot = self
            .index
            .entry(note.department.clone())
            .or_default()
            .entry(note.organ_region.clone())
            .or_default();
        let outcome = match slot.get_mut(&note.differentials) {
            Some(existing) => {
                *existing = merge_notes(existing, &note)?;
                MutationOutcome::Merged
            }
            None => {
                slot.insert(note.differentials.clone(), note);
                MutationOutcome::Inserted
            }
        };
        self.version += 1;
        Ok(outcome)
    }

    /// Notes stored under any of `paths`, each path counted once.
    pub fn notes_under_paths(
        &self,
        paths: &[AnatomicalPath],
    ) -> Result<Vec<&ExperienceNote>, StoreError> {
        let mut unique = BTreeSet::new();
        for path in paths {
            if !self.taxonomy.contains(path) {
                return Err(StoreError::UnknownPath(path.clone()));
            }
            unique.insert(path);
        }
        let mut out: Vec<_> = unique
            .into_iter()
            .filter_map(|p| self.index.get(&p.department)?.get(&p.organ))
            .flat_map(BTreeMap::values)
            .collect();
        sort_canonical(&mut out);
        Ok(out)
    }

    pub fn to_document(&self, metadata: Option<serde_json::Value>) -> StoreDocument {
        let notes: Vec<ExperienceNote> = self.notes().into_iter().cloned().collect();
        StoreDocument {
            taxonomy_checksum: self.taxonomy.checksum(),
            version: self.version,
            metadata,
            checksum: notes_checksum(&notes),
            notes,
        }
    }

    pub fn to_json(&self, metadata: Option<serde_json::Value>) -> String {
        let mut text = serde_json::to_string_pretty(&self.to_document(metadata))
            .expect("store document serializes");
        text.push('\n');
        text
    }

    pub fn from_document(doc: StoreDocument, taxonomy: Taxonomy) -> Result<Self, StoreError> {
        if doc.taxonomy_checksum != taxonomy.checksum() {
            return Err(StoreError::CorruptStore(
                "taxonomy checksum does not match the provided taxonomy".into(),
            ));
        }
        if doc.checksum != notes_checksum(&doc.notes) {
            return Err(StoreError::CorruptStore("notes checksum mismatch".into()));
        }
        let mut store = Self::new(taxonomy);
        for note in doc.notes {
            let violations = validate_note(&note, &store.taxonomy);
            if !violations.is_empty() {
                return Err(StoreError::InvalidNote {
                    key: note.differentials.display().to_string(),
                    violations,
                });
            }
            let slot = store
                .index
                .entry(note.department.clone())
                .or_default()
                .entry(note.organ_region.clone())
                .or_default();
            if slot.contains_key(&note.differentials) {
                return Err(StoreError::CorruptStore(format!(
                    "duplicate note {} under {}",
                    note.differentials,
                    note.path()
                )));
            }
            slot.insert(note.differentials.clone(), note);
        }
        store.version = doc.version;
        Ok(store)
    }

    pub fn from_json(text: &str, taxonomy: Taxonomy) -> Result<Self, StoreError> {
        let doc: StoreDocument =
            serde_json::from_str(text).map_err(|e| StoreError::CorruptStore(e.to_string()))?;
        Self::from_document(doc, taxonomy)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.save_with_metadata(path, None)
    }

    pub fn save_with_metadata(
        &self,
        path: &Path,
        metadata: Option<serde_json::Value>,
    ) -> Result<(), StoreError> {
        std::fs::write(path, self.to_json(metadata))?;
        Ok(())
    }

    pub fn load(path: &Path, taxonomy: Taxonomy) -> Result<Self, StoreError> {
        Self::from_json(&std::fs::read_to_string(path)?, taxonomy)
    }
}

fn sort_canonical(notes: &mut [&ExperienceNote]) {
    notes.sort_by(|a, b| {
        (&a.department, &a.organ_region, a.differentials.display()).cmp(&(
            &b.department,
            &b.organ_region,
            b.differentials.display(),
        ))
    });
}
