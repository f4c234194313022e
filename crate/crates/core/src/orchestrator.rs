//! Session execution: open the dialogue with the chief complaint, drive the
//! doctor/environment loop, enforce the turn limit, and produce replayable
//! session records. Batches fan out across a bounded worker pool; each
//! session stays strictly sequential internally because every doctor move
//! conditions on the full history so far.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casegen::CaseProfile;
use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::protocol::{
    parse_doctor_reply, render_prompt, DialogueHistory, DoctorAction, DoctorMove, PromptRole,
    ProtocolError, Speaker, Utterance,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Prompt(#[from] ProtocolError),
}

/// Per-session limits. One turn is one doctor action, the final diagnosis
/// included; a diagnosis on the very last allowed turn still counts as
/// diagnosed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SessionConfig {
    pub t_max: u32,
    pub malformed_reply_retries: u32,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            t_max: 15,
            malformed_reply_retries: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionOutcome {
    Diagnosed { disease_name: String, at_turn: u32 },
    Timeout,
    ProtocolFailure { reason: String },
}

/// Ground-truth snapshot kept on every record so scoring and replay need no
/// access to the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRef {
    pub disease_id: String,
    pub disease_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// One case queued for execution: identifier, generated profile, and truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCase {
    pub case_id: String,
    pub profile: CaseProfile,
    pub truth: CaseRef,
}

/// Full transcript and tallies for one session; the unit of persistence.
/// Raw backend texts are retained so counts and outcome can be re-derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub case_id: String,
    pub model_id: String,
    pub t_max: u32,
    pub case_ref: CaseRef,
    pub history: DialogueHistory,
    pub outcome: SessionOutcome,
    pub positive_findings: u32,
    pub negative_findings: u32,
    pub doctor_turns: u32,
}

/// The three per-session backends. HTTP backends are shared handles;
/// scripted backends must be fresh instances per session.
#[derive(Clone)]
pub struct SessionBackends {
    pub doctor: Arc<dyn ChatBackend>,
    pub patient: Arc<dyn ChatBackend>,
    pub examiner: Arc<dyn ChatBackend>,
}

/// Supplies backends for each session of a batch.
pub trait BackendFactory: Sync {
    fn session_backends(&self, case_index: usize) -> Result<SessionBackends, GatewayError>;
}

// ---------------------------------------------------------------------------
// Dialogue steps
// ---------------------------------------------------------------------------

const FINDING_FORMAT_REMINDER: &str = "Your previous reply did not follow the required format. Respond again using one [!Positive!](your response) or [!Negative!](your response) line per item.";

const ACTION_FORMAT_REMINDER: &str = "Your previous reply did not contain exactly one valid action. Reply again with the required format:\nThought: (your reasoning process)\nAction: exactly one of [!Ask!](your question), [!Exam!](your physical exam item), [!Test!](your test request), [!Diagnosis!](your diagnosis)";

/// Ask the patient agent for the chief complaint `u_1`. The opening carries
/// no finding markers and contributes zero findings.
pub fn open_dialogue(
    case: &CaseProfile,
    patient: &dyn ChatBackend,
) -> Result<Utterance, SessionError> {
    let prompt = render_prompt(PromptRole::PatientOpening {
        disease_description: &case.disease_description(),
    })?;
    let text = patient.complete(&ChatRequest::user_prompt(patient.model_id(), prompt))?;
    Ok(Utterance::opening(text))
}

/// Environment response routing: questions to the patient, examinations to
/// the examiner, diagnosis to `End`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Routed {
    Reply(Utterance),
    End,
}

fn environment_reply(
    backend: &dyn ChatBackend,
    speaker: Speaker,
    prompt: &str,
    retries: u32,
) -> Result<Utterance, SessionError> {
    let mut attempt_prompt = prompt.to_string();
    for attempt in 0..=retries {
        let text = backend.complete(&ChatRequest::user_prompt(backend.model_id(), &attempt_prompt))?;
        match Utterance::from_environment_reply(speaker, text.clone()) {
            Ok(utterance) => return Ok(utterance),
            Err(err) if attempt < retries => {
                attempt_prompt = format!("{prompt}\n\n{FINDING_FORMAT_REMINDER}\n(Previous reply: {text})");
                let _ = err;
            }
            Err(err) => {
                return Err(SessionError::Protocol(format!(
                    "environment reply rejected after {} attempts: {err}",
                    retries + 1
                )))
            }
        }
    }
    unreachable!("loop returns on every path")
}

/// Route one doctor action to the responding agent and parse the reply.
pub fn route_response(
    action: &DoctorAction,
    case: &CaseProfile,
    patient: &dyn ChatBackend,
    examiner: &dyn ChatBackend,
    retries: u32,
) -> Result<Routed, SessionError> {
    let description = case.disease_description();
    match action {
        DoctorAction::Ask(question) => {
            let prompt = render_prompt(PromptRole::Patient {
                disease_description: &description,
                doctor_question: question,
            })?;
            Ok(Routed::Reply(environment_reply(
                patient,
                Speaker::Patient,
                &prompt,
                retries,
            )?))
        }
        DoctorAction::Test(request) => {
            let prompt = render_prompt(PromptRole::Examiner {
                disease_description: &description,
                doctor_examination: request,
            })?;
            Ok(Routed::Reply(environment_reply(
                examiner,
                Speaker::Examiner,
                &prompt,
                retries,
            )?))
        }
        DoctorAction::Diag(_) => Ok(Routed::End),
    }
}

fn doctor_move(
    history: &DialogueHistory,
    doctor: &dyn ChatBackend,
    retries: u32,
) -> Result<DoctorMove, SessionError> {
    let base_prompt = render_prompt(PromptRole::Doctor {
        chat_history: &history.render_chat_history(),
    })?;
    let mut prompt = base_prompt.clone();
    for attempt in 0..=retries {
        let text = doctor.complete(&ChatRequest::user_prompt(doctor.model_id(), &prompt))?;
        match parse_doctor_reply(&text) {
            Ok(mov) => return Ok(mov),
            Err(err) if attempt < retries => {
                prompt = format!("{base_prompt}\n\n{ACTION_FORMAT_REMINDER}");
                let _ = err;
            }
            Err(err) => {
                return Err(SessionError::Protocol(format!(
                    "malformed doctor reply after {} attempts: {err}",
                    retries + 1
                )))
            }
        }
    }
    unreachable!("loop returns on every path")
}

// ---------------------------------------------------------------------------
// Session loop
// ---------------------------------------------------------------------------

/// Execute one diagnostic session end to end. Failures never escape: backend
/// or protocol trouble yields a `ProtocolFailure` record with the partial
/// history preserved.
pub fn run_session(
    case: &SessionCase,
    backends: &SessionBackends,
    config: &SessionConfig,
) -> SessionRecord {
    assert!(config.t_max >= 1, "t_max must be at least 1");
    let mut history = DialogueHistory::new();
    let outcome = drive_session(case, backends, config, &mut history);
    SessionRecord {
        case_id: case.case_id.clone(),
        model_id: backends.doctor.model_id().to_string(),
        t_max: config.t_max,
        case_ref: case.truth.clone(),
        positive_findings: history.positive_findings(),
        negative_findings: history.negative_findings(),
        doctor_turns: history.doctor_turns(),
        history,
        outcome,
    }
}

fn drive_session(
    case: &SessionCase,
    backends: &SessionBackends,
    config: &SessionConfig,
    history: &mut DialogueHistory,
) -> SessionOutcome {
    let opening = match open_dialogue(&case.profile, backends.patient.as_ref()) {
        Ok(u) => u,
        Err(err) => {
            return SessionOutcome::ProtocolFailure {
                reason: format!("opening failed: {err}"),
            }
        }
    };
    if let Err(err) = history.open(opening) {
        return SessionOutcome::ProtocolFailure {
            reason: err.to_string(),
        };
    }

    for turn in 1..=config.t_max {
        let mov = match doctor_move(history, backends.doctor.as_ref(), config.malformed_reply_retries)
        {
            Ok(mov) => mov,
            Err(err) => {
                return SessionOutcome::ProtocolFailure {
                    reason: format!("turn {turn}: {err}"),
                }
            }
        };
        let routed = match route_response(
            &mov.action,
            &case.profile,
            backends.patient.as_ref(),
            backends.examiner.as_ref(),
            config.malformed_reply_retries,
        ) {
            Ok(routed) => routed,
            Err(err) => {
                return SessionOutcome::ProtocolFailure {
                    reason: format!("turn {turn}: {err}"),
                }
            }
        };
        match routed {
            Routed::End => {
                let diagnosis = mov.action.payload().to_string();
                if let Err(err) = history.append_end(mov) {
                    return SessionOutcome::ProtocolFailure {
                        reason: err.to_string(),
                    };
                }
                return SessionOutcome::Diagnosed {
                    disease_name: diagnosis,
                    at_turn: turn,
                };
            }
            Routed::Reply(utterance) => {
                if let Err(err) = history.append(mov, utterance) {
                    return SessionOutcome::ProtocolFailure {
                        reason: err.to_string(),
                    };
                }
            }
        }
    }
    SessionOutcome::Timeout
}

// ---------------------------------------------------------------------------
// Batch execution
// ---------------------------------------------------------------------------

/// Run sessions over a worker pool. The returned records match the input
/// case order; per-session failures are recorded and never abort the batch.
pub fn run_batch(
    cases: &[SessionCase],
    factory: &dyn BackendFactory,
    config: &SessionConfig,
    parallelism: usize,
) -> Vec<SessionRecord> {
    run_batch_with(cases, factory, config, parallelism, &|_| {})
}

/// Like [`run_batch`], invoking `on_complete` as each session finishes
/// (completion order, not input order).
pub fn run_batch_with(
    cases: &[SessionCase],
    factory: &dyn BackendFactory,
    config: &SessionConfig,
    parallelism: usize,
    on_complete: &(dyn Fn(&SessionRecord) + Sync),
) -> Vec<SessionRecord> {
    assert!(parallelism >= 1, "parallelism must be at least 1");
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<SessionRecord>>> =
        (0..cases.len()).map(|_| Mutex::new(None)).collect();
    let workers = parallelism.min(cases.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= cases.len() {
                    break;
                }
                let case = &cases[idx];
                let record = match factory.session_backends(idx) {
                    Ok(backends) => run_session(case, &backends, config),
                    Err(err) => SessionRecord {
                        case_id: case.case_id.clone(),
                        model_id: "unavailable".into(),
                        t_max: config.t_max,
                        case_ref: case.truth.clone(),
                        history: DialogueHistory::new(),
                        outcome: SessionOutcome::ProtocolFailure {
                            reason: format!("backend setup failed: {err}"),
                        },
                        positive_findings: 0,
                        negative_findings: 0,
                        doctor_turns: 0,
                    },
                };
                on_complete(&record);
                *slots[idx].lock().unwrap() = Some(record);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub case_id: String,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-derive actions, findings, and outcome from the record's raw backend
/// texts and compare them with the stored values.
pub fn replay_record(record: &SessionRecord) -> ReplayReport {
    let mut mismatches = Vec::new();
    let mut positive = 0u32;
    let mut negative = 0u32;
    let mut doctor_turns = 0u32;
    let mut last_action: Option<DoctorAction> = None;

    for (idx, turn) in record.history.turns().iter().enumerate() {
        if let Some(mov) = &turn.doctor {
            doctor_turns += 1;
            match parse_doctor_reply(&mov.raw) {
                Ok(reparsed) => {
                    if reparsed.action != mov.action {
                        mismatches.push(format!(
                            "turn {idx}: reparsed action {:?} != stored {:?}",
                            reparsed.action, mov.action
                        ));
                    }
                    last_action = Some(reparsed.action);
                }
                Err(err) => mismatches.push(format!("turn {idx}: raw doctor text no longer parses: {err}")),
            }
        }
        if let Some(reply) = &turn.reply {
            if idx == 0 {
                if !reply.findings.is_empty() {
                    mismatches.push("opening utterance carries findings".into());
                }
                continue;
            }
            match crate::protocol::parse_finding_lines(&reply.text) {
                Ok(findings) => {
                    if findings != reply.findings {
                        mismatches.push(format!("turn {idx}: reparsed findings differ"));
                    }
                    for f in &findings {
                        match f.polarity {
                            crate::protocol::Polarity::Positive => positive += 1,
                            crate::protocol::Polarity::Negative => negative += 1,
                        }
                    }
                }
                Err(err) => mismatches.push(format!("turn {idx}: raw reply no longer parses: {err}")),
            }
        }
    }

    if positive != record.positive_findings {
        mismatches.push(format!(
            "positive findings: replayed {positive} != stored {}",
            record.positive_findings
        ));
    }
    if negative != record.negative_findings {
        mismatches.push(format!(
            "negative findings: replayed {negative} != stored {}",
            record.negative_findings
        ));
    }
    if doctor_turns != record.doctor_turns {
        mismatches.push(format!(
            "doctor turns: replayed {doctor_turns} != stored {}",
            record.doctor_turns
        ));
    }

    match &record.outcome {
        SessionOutcome::Diagnosed {
            disease_name,
            at_turn,
        } => match &last_action {
            Some(DoctorAction::Diag(name)) => {
                if name != disease_name {
                    mismatches.push(format!(
                        "diagnosis payload: replayed `{name}` != stored `{disease_name}`"
                    ));
                }
                if *at_turn != doctor_turns {
                    mismatches.push(format!(
                        "diagnosis turn: stored {at_turn} != replayed {doctor_turns}"
                    ));
                }
            }
            other => mismatches.push(format!(
                "outcome diagnosed but last replayed action is {other:?}"
            )),
        },
        SessionOutcome::Timeout => {
            if matches!(last_action, Some(DoctorAction::Diag(_))) {
                mismatches.push("outcome timeout but transcript ends in a diagnosis".into());
            }
            if doctor_turns != record.t_max {
                mismatches.push(format!(
                    "timeout with {doctor_turns} turns, expected t_max {}",
                    record.t_max
                ));
            }
        }
        SessionOutcome::ProtocolFailure { .. } => {}
    }

    ReplayReport {
        case_id: record.case_id.clone(),
        mismatches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casegen::{DemographicProfile, SymptomManifestation, Trend};
    use crate::gateway::ScriptedBackend;
    use std::collections::HashSet;

    fn test_case() -> SessionCase {
        SessionCase {
            case_id: "case-0000".into(),
            profile: CaseProfile {
                disease_id: "flu".into(),
                disease_text: "A viral respiratory infection.".into(),
                demographics: DemographicProfile {
                    age: 30,
                    gender: "Female".into(),
                    occupation: "Teacher".into(),
                    history_notes: "Unremarkable.".into(),
                },
                symptoms: vec![SymptomManifestation {
                    category: "Systemic".into(),
                    manifestation: "fever and chills".into(),
                    trend: Trend::Worsening,
                }],
                raw_document: "synthetic".into(),
            },
            truth: CaseRef {
                disease_id: "flu".into(),
                disease_name: "Influenza".into(),
                aliases: vec!["Flu".into()],
            },
        }
    }

    fn backends(
        doctor: Vec<&str>,
        patient: Vec<&str>,
        examiner: Vec<&str>,
    ) -> SessionBackends {
        SessionBackends {
            doctor: Arc::new(ScriptedBackend::labeled("doc-model", doctor)),
            patient: Arc::new(ScriptedBackend::new(patient)),
            examiner: Arc::new(ScriptedBackend::new(examiner)),
        }
    }

    #[test]
    fn opening_utterance_comes_from_patient_with_zero_findings() {
        let case = test_case();
        let patient = ScriptedBackend::new([
            "I've had this nasty cough for over a week and I'm really tired all the time.",
        ]);
        let opening = open_dialogue(&case.profile, &patient).unwrap();
        assert_eq!(
            opening.text,
            "I've had this nasty cough for over a week and I'm really tired all the time."
        );
        assert_eq!(opening.speaker, Speaker::Patient);
        assert!(opening.findings.is_empty());
    }

    #[test]
    fn opening_replays_identically_from_a_fresh_script() {
        let case = test_case();
        let text = "My head hurts.";
        let a = open_dialogue(&case.profile, &ScriptedBackend::new([text])).unwrap();
        let b = open_dialogue(&case.profile, &ScriptedBackend::new([text])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ask_routes_to_patient_test_routes_to_examiner_diag_ends() {
        let case = test_case();
        let patient = ScriptedBackend::new(["[!Negative!](No fever.)"]);
        let examiner = ScriptedBackend::new(["[!Positive!](ECG result: Sinus rhythm, normal heart rate.)"]);

        let routed = route_response(
            &DoctorAction::Ask("any fever?".into()),
            &case.profile,
            &patient,
            &examiner,
            1,
        )
        .unwrap();
        match routed {
            Routed::Reply(u) => {
                assert_eq!(u.speaker, Speaker::Patient);
                assert_eq!(u.findings.len(), 1);
                assert_eq!(u.findings[0].polarity, crate::protocol::Polarity::Negative);
            }
            Routed::End => panic!("Ask must not end the session"),
        }

        let routed = route_response(
            &DoctorAction::Test("ECG".into()),
            &case.profile,
            &patient,
            &examiner,
            1,
        )
        .unwrap();
        match routed {
            Routed::Reply(u) => {
                assert_eq!(u.speaker, Speaker::Examiner);
                assert_eq!(u.findings.len(), 1);
                assert_eq!(u.findings[0].polarity, crate::protocol::Polarity::Positive);
            }
            Routed::End => panic!("Test must not end the session"),
        }

        let routed = route_response(
            &DoctorAction::Diag("X".into()),
            &case.profile,
            &patient,
            &examiner,
            1,
        )
        .unwrap();
        assert_eq!(routed, Routed::End);
    }

    #[test]
    fn session_diagnoses_and_counts_findings() {
        let case = test_case();
        let backends = backends(
            vec![
                "Thought: narrow down.\nAction: [!Ask!](Any fever?)",
                "Thought: confirm.\nAction: [!Test!](Rapid flu antigen test)",
                "Thought: consistent.\nAction: [!Diagnosis!](Influenza)",
            ],
            vec![
                "I've been feverish and achy for two days.",
                "[!Positive!](Yes, I've had a fever since yesterday.)",
            ],
            vec!["[!Positive!](Rapid antigen: influenza A positive.)"],
        );
        let record = run_session(&case, &backends, &SessionConfig::default());
        assert_eq!(
            record.outcome,
            SessionOutcome::Diagnosed {
                disease_name: "Influenza".into(),
                at_turn: 3
            }
        );
        assert_eq!(record.doctor_turns, 3);
        assert_eq!(record.positive_findings, 2);
        assert_eq!(record.negative_findings, 0);
        assert_eq!(record.history.len() as u32, record.doctor_turns + 1);
        assert!(matches!(record.history.last_action(), Some(DoctorAction::Diag(_))));
    }

    #[test]
    fn doctor_that_never_diagnoses_times_out_at_t_max() {
        let case = test_case();
        let t_max = 4;
        let doctor: Vec<String> = (0..t_max)
            .map(|i| format!("Thought: more data.\nAction: [!Ask!](question {i}?)"))
            .collect();
        let patient: Vec<String> = std::iter::once("opening complaint".to_string())
            .chain((0..t_max).map(|i| format!("[!Negative!](answer {i})")))
            .collect();
        let backends = SessionBackends {
            doctor: Arc::new(ScriptedBackend::new(doctor)),
            patient: Arc::new(ScriptedBackend::new(patient)),
            examiner: Arc::new(ScriptedBackend::new(Vec::<String>::new())),
        };
        let config = SessionConfig {
            t_max,
            ..Default::default()
        };
        let record = run_session(&case, &backends, &config);
        assert_eq!(record.outcome, SessionOutcome::Timeout);
        assert_eq!(record.doctor_turns, t_max);
        assert_eq!(record.negative_findings, t_max);
    }

    #[test]
    fn diag_on_the_last_allowed_turn_counts_as_diagnosed() {
        let case = test_case();
        let backends = backends(
            vec![
                "Action: [!Ask!](one?)",
                "Action: [!Diagnosis!](Influenza)",
            ],
            vec!["opening", "[!Negative!](no)"],
            vec![],
        );
        let config = SessionConfig {
            t_max: 2,
            ..Default::default()
        };
        let record = run_session(&case, &backends, &config);
        assert_eq!(
            record.outcome,
            SessionOutcome::Diagnosed {
                disease_name: "Influenza".into(),
                at_turn: 2
            }
        );
    }

    #[test]
    fn malformed_doctor_reply_gets_one_reprompt() {
        let case = test_case();
        let backends = backends(
            vec![
                "I think we should ask about fever.",
                "Thought: retry.\nAction: [!Diagnosis!](Influenza)",
            ],
            vec!["opening"],
            vec![],
        );
        let record = run_session(&case, &backends, &SessionConfig::default());
        assert!(matches!(record.outcome, SessionOutcome::Diagnosed { .. }));
        assert_eq!(record.doctor_turns, 1, "retry does not consume a turn");
    }

    #[test]
    fn two_malformed_doctor_replies_fail_the_session() {
        let case = test_case();
        let backends = backends(
            vec!["no marker here", "still no marker"],
            vec!["opening"],
            vec![],
        );
        let record = run_session(&case, &backends, &SessionConfig::default());
        match &record.outcome {
            SessionOutcome::ProtocolFailure { reason } => {
                assert!(reason.contains("malformed doctor reply"), "reason: {reason}")
            }
            other => panic!("expected protocol failure, got {other:?}"),
        }
    }

    #[test]
    fn unmarked_environment_reply_fails_after_reprompt() {
        let case = test_case();
        let backends = backends(
            vec!["Action: [!Ask!](fever?)"],
            vec!["opening", "plain answer", "still plain"],
            vec![],
        );
        let record = run_session(&case, &backends, &SessionConfig::default());
        assert!(matches!(
            record.outcome,
            SessionOutcome::ProtocolFailure { .. }
        ));
    }

    #[test]
    fn backend_exhaustion_surfaces_as_protocol_failure() {
        let case = test_case();
        let backends = backends(vec![], vec!["opening"], vec![]);
        let record = run_session(&case, &backends, &SessionConfig::default());
        assert!(matches!(
            record.outcome,
            SessionOutcome::ProtocolFailure { .. }
        ));
    }

    struct ScriptFactory {
        doctor: Vec<Vec<String>>,
        patient: Vec<Vec<String>>,
        examiner: Vec<Vec<String>>,
    }

    impl BackendFactory for ScriptFactory {
        fn session_backends(&self, idx: usize) -> Result<SessionBackends, GatewayError> {
            Ok(SessionBackends {
                doctor: Arc::new(ScriptedBackend::labeled("doc-model", self.doctor[idx].clone())),
                patient: Arc::new(ScriptedBackend::new(self.patient[idx].clone())),
                examiner: Arc::new(ScriptedBackend::new(self.examiner[idx].clone())),
            })
        }
    }

    fn four_case_factory() -> (Vec<SessionCase>, ScriptFactory) {
        let cases: Vec<SessionCase> = (0..4)
            .map(|i| {
                let mut c = test_case();
                c.case_id = format!("case-{i:04}");
                c
            })
            .collect();
        let ok_doctor = vec![
            "Action: [!Ask!](fever?)".to_string(),
            "Action: [!Diagnosis!](Influenza)".to_string(),
        ];
        let bad_doctor = vec!["nope".to_string(), "still nope".to_string()];
        let factory = ScriptFactory {
            doctor: vec![ok_doctor.clone(), ok_doctor.clone(), bad_doctor, ok_doctor],
            patient: (0..4)
                .map(|_| vec!["opening".to_string(), "[!Negative!](no fever)".to_string()])
                .collect(),
            examiner: (0..4).map(|_| vec![]).collect(),
        };
        (cases, factory)
    }

    #[test]
    fn batch_preserves_input_order_and_records_partial_failures() {
        let (cases, factory) = four_case_factory();
        let records = run_batch(&cases, &factory, &SessionConfig::default(), 2);
        assert_eq!(records.len(), 4);
        for (i, record) in records.iter().enumerate() {
            assert_eq!(record.case_id, format!("case-{i:04}"));
        }
        let failures = records
            .iter()
            .filter(|r| matches!(r.outcome, SessionOutcome::ProtocolFailure { .. }))
            .count();
        assert_eq!(failures, 1);
    }

    #[test]
    fn batch_results_are_independent_of_parallelism() {
        let (cases, factory) = four_case_factory();
        let serial = run_batch(&cases, &factory, &SessionConfig::default(), 1);
        let (cases2, factory2) = four_case_factory();
        let parallel = run_batch(&cases2, &factory2, &SessionConfig::default(), 4);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn batch_completion_callback_sees_every_record() {
        let (cases, factory) = four_case_factory();
        let seen = Mutex::new(HashSet::new());
        let records = run_batch_with(&cases, &factory, &SessionConfig::default(), 3, &|r| {
            seen.lock().unwrap().insert(r.case_id.clone());
        });
        assert_eq!(seen.lock().unwrap().len(), records.len());
    }

    #[test]
    fn replay_reproduces_counts_and_outcome() {
        let case = test_case();
        let backends = backends(
            vec![
                "Thought: a.\nAction: [!Ask!](Any fever?)",
                "Thought: b.\nAction: [!Exam!](Throat inspection)",
                "Thought: c.\nAction: [!Diagnosis!](Influenza)",
            ],
            vec!["opening", "[!Positive!](Feverish since yesterday.)"],
            vec!["[!Negative!](Throat: no exudate.)\n[!Positive!](Mild pharyngeal redness.)"],
        );
        let record = run_session(&case, &backends, &SessionConfig::default());
        let report = replay_record(&record);
        assert!(report.matches(), "mismatches: {:?}", report.mismatches);
    }

    #[test]
    fn replay_detects_tampered_counts() {
        let case = test_case();
        let backends = backends(
            vec!["Action: [!Diagnosis!](Influenza)"],
            vec!["opening"],
            vec![],
        );
        let mut record = run_session(&case, &backends, &SessionConfig::default());
        record.positive_findings = 99;
        let report = replay_record(&record);
        assert!(!report.matches());
    }
}
