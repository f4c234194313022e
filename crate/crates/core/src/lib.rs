//! Engine for evaluating diagnostic reasoning through simulated multi-turn
//! doctor-patient-examiner dialogues.
//!
//! The pipeline: sample a disease from a knowledge graph ([`kb`]), generate a
//! synthetic patient case ([`casegen`]), run the consultation state machine
//! against chat backends ([`orchestrator`] over [`protocol`] and
//! [`gateway`]), then score outcomes ([`metrics`]) and transcript quality
//! ([`judge`]). Everything is replayable offline through scripted backends
//! ([`fixture`]).

pub mod casegen;
pub mod fixture;
pub mod gateway;
pub mod judge;
pub mod kb;
pub mod metrics;
pub mod orchestrator;
pub mod protocol;
mod template;

pub use casegen::{CaseProfile, ValidationReport};
pub use gateway::{BackendConfig, ChatBackend, ChatRequest, ScriptedBackend};
pub use kb::{DiseaseNode, Encyclopedia, KnowledgeGraph};
pub use metrics::{AggregateSummary, RunSummary, SessionMetrics};
pub use orchestrator::{SessionCase, SessionConfig, SessionOutcome, SessionRecord};
pub use protocol::{DialogueHistory, DoctorAction, FindingLine, Utterance};
