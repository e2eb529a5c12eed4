//! Experience memory for diagnostic agents.
//!
//! Agents accumulate pairwise differential-diagnosis notes from their own
//! mistakes, store them in a department → organ hierarchy, and retrieve them
//! by embedding similarity of the differential pair when a new case arrives.

pub mod agent;
pub mod checksum;
pub mod construction;
pub mod corpus;
pub mod evaluation;
pub mod http;
pub mod jsonl;
pub mod label;
pub mod note;
pub mod retrieval;
pub mod store;
pub mod taxonomy;

pub use agent::{AgentError, AgentGateway, Attempt, CandidateSource, Diagnosis, MockAgent, MockAgentScript};
pub use corpus::{parse_case_corpus, serialize_case_corpus, CaseRecord, CorpusError};
pub use label::{canonical_pair_key, normalize, DiagnosisLabel, LabelError, PairKey};
pub use note::{merge_notes, validate_note, ExperienceNote, PhaseTag, Provenance};
pub use retrieval::{retrieve, EmbeddingProvider, MockEmbedder, RetrievalConfig, RetrievedNote};
pub use store::{MemoryStore, MutationOutcome, StoreError};
pub use taxonomy::{AnatomicalPath, Taxonomy};
