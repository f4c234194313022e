//! Scripted session fixtures: a case, three reply scripts, and the expected
//! tallies, stored as one JSON document. Running a fixture replays the
//! scripted dialogue through the real session loop, so golden transcripts
//! double as end-to-end regression tests.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ScriptedBackend;
use crate::metrics::diagnosis_matches;
use crate::orchestrator::{
    run_session, SessionBackends, SessionCase, SessionConfig, SessionOutcome, SessionRecord,
};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("failed to read fixture {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed fixture {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedSession {
    /// "diagnosed" or "timeout".
    pub outcome: String,
    #[serde(default)]
    pub diagnosis: Option<String>,
    #[serde(default)]
    pub at_turn: Option<u32>,
    pub doctor_turns: u32,
    pub positive_findings: u32,
    pub negative_findings: u32,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedSessionFixture {
    pub name: String,
    pub model_id: String,
    pub t_max: u32,
    pub case: SessionCase,
    pub doctor_replies: Vec<String>,
    pub patient_replies: Vec<String>,
    pub examiner_replies: Vec<String>,
    pub expected: ExpectedSession,
}

impl ScriptedSessionFixture {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| FixtureError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Load every `*.json` fixture in a directory, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, FixtureError> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|source| FixtureError::Io {
                path: dir.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::load(p)).collect()
    }

    /// Fresh scripted backends positioned at the start of each script.
    pub fn backends(&self) -> SessionBackends {
        SessionBackends {
            doctor: Arc::new(ScriptedBackend::labeled(
                self.model_id.clone(),
                self.doctor_replies.clone(),
            )),
            patient: Arc::new(ScriptedBackend::new(self.patient_replies.clone())),
            examiner: Arc::new(ScriptedBackend::new(self.examiner_replies.clone())),
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            t_max: self.t_max,
            ..Default::default()
        }
    }

    pub fn run(&self) -> SessionRecord {
        run_session(&self.case, &self.backends(), &self.session_config())
    }

    /// Compare an executed record against the fixture expectations; empty
    /// result means an exact reproduction.
    pub fn check(&self, record: &SessionRecord) -> Vec<String> {
        let mut mismatches = Vec::new();
        let mut expect = |name: &str, got: String, want: String| {
            if got != want {
                mismatches.push(format!("{name}: got {got}, expected {want}"));
            }
        };
        expect(
            "doctor_turns",
            record.doctor_turns.to_string(),
            self.expected.doctor_turns.to_string(),
        );
        expect(
            "positive_findings",
            record.positive_findings.to_string(),
            self.expected.positive_findings.to_string(),
        );
        expect(
            "negative_findings",
            record.negative_findings.to_string(),
            self.expected.negative_findings.to_string(),
        );
        match (&record.outcome, self.expected.outcome.as_str()) {
            (
                SessionOutcome::Diagnosed {
                    disease_name,
                    at_turn,
                },
                "diagnosed",
            ) => {
                if let Some(want) = &self.expected.diagnosis {
                    expect("diagnosis", disease_name.clone(), want.clone());
                }
                if let Some(want) = self.expected.at_turn {
                    expect("at_turn", at_turn.to_string(), want.to_string());
                }
                let correct = diagnosis_matches(
                    disease_name,
                    &record.case_ref.disease_name,
                    &record.case_ref.aliases,
                );
                expect(
                    "correct",
                    correct.to_string(),
                    self.expected.correct.to_string(),
                );
            }
            (SessionOutcome::Timeout, "timeout") => {}
            (outcome, want) => {
                mismatches.push(format!("outcome: got {outcome:?}, expected {want}"))
            }
        }
        mismatches
    }
}
