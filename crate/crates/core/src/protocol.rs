//! Dialogue wire protocol: the bracket-marker grammar, the doctor action
//! space, finding tags, the dialogue history fold, and the agent prompt
//! templates.
//!
//! Marker grammar, shared by every backend:
//!
//! ```text
//! [!Tag!](payload)
//! ```
//!
//! The payload runs from the opening parenthesis to the last closing
//! parenthesis on the same line (bounded by the next marker on that line, if
//! any), so nested parentheses inside a payload survive. Tags are matched
//! case-sensitively. Doctor replies carry exactly one action marker out of
//! `Ask`, `Exam`, `Test`, `Diagnosis`; patient and examiner replies carry one
//! `Positive`/`Negative` marker per finding line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{fill_template, TemplateError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("reply contains no action marker")]
    NoActionMarker,
    #[error("reply contains {0} action markers, expected exactly one")]
    MultipleActions(usize),
    #[error("unknown action marker `[!{0}!]`")]
    UnknownMarker(String),
    #[error("action marker `[!{0}!]` has an empty payload")]
    EmptyPayload(String),
    #[error("action marker `[!{0}!]` has no closing parenthesis on its line")]
    UnterminatedPayload(String),
    #[error("environment reply carries no [!Positive!]/[!Negative!] finding markers")]
    NoFindingMarkers,
    #[error("dialogue history not opened: first utterance must be the patient opening")]
    HistoryNotOpened,
    #[error("dialogue history already opened")]
    HistoryAlreadyOpened,
    #[error("opening utterance must come from the patient")]
    BadOpeningSpeaker,
    #[error("append_end requires a Diag action, got {0}")]
    EndWithoutDiag(&'static str),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

// ---------------------------------------------------------------------------
// Actions and findings
// ---------------------------------------------------------------------------

/// The doctor's discrete action space. `[!Exam!]` markers normalize to `Test`
/// at parse time since physical examinations route to the examiner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum DoctorAction {
    Ask(String),
    Test(String),
    Diag(String),
}

impl DoctorAction {
    pub fn payload(&self) -> &str {
        match self {
            DoctorAction::Ask(s) | DoctorAction::Test(s) | DoctorAction::Diag(s) => s,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            DoctorAction::Ask(_) => "Ask",
            DoctorAction::Test(_) => "Test",
            DoctorAction::Diag(_) => "Diag",
        }
    }
}

/// The literal marker the doctor emitted, kept for audit; `Exam` and `Test`
/// both fold into [`DoctorAction::Test`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMarker {
    Ask,
    Exam,
    Test,
    Diagnosis,
}

/// One parsed doctor reply: reasoning block, normalized action, original
/// marker, and the verbatim model output for replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoctorMove {
    pub action: DoctorAction,
    pub marker: ActionMarker,
    pub thought: String,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A single tagged fragment of an environment reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingLine {
    pub polarity: Polarity,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Patient,
    Examiner,
    Doctor,
}

/// One utterance as stored in the history: verbatim text plus the findings
/// parsed out of it. The opening complaint and doctor utterances carry no
/// findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub findings: Vec<FindingLine>,
}

impl Utterance {
    /// The patient's chief complaint; carries no finding markers by design.
    pub fn opening(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Patient,
            text: text.into(),
            findings: Vec::new(),
        }
    }

    /// Parse a patient/examiner reply into an utterance; fails when the reply
    /// carries no finding markers.
    pub fn from_environment_reply(
        speaker: Speaker,
        text: impl Into<String>,
    ) -> Result<Self, ProtocolError> {
        let text = text.into();
        let findings = parse_finding_lines(&text)?;
        Ok(Self {
            speaker,
            text,
            findings,
        })
    }

    /// Marker-free rendering: the finding payloads joined in document order,
    /// or the raw text when no findings are attached.
    pub fn plain_text(&self) -> String {
        if self.findings.is_empty() {
            self.text.clone()
        } else {
            self.findings
                .iter()
                .map(|f| f.text.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

// ---------------------------------------------------------------------------
// Marker scanning
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct MarkerStart {
    /// Byte offset of the `[` that starts the marker.
    start: usize,
    /// Byte offset just past the `(`.
    payload_start: usize,
    tag: String,
}

/// Scan for `[!Tag!](` occurrences. Bracket text not followed by `(` is not a
/// marker and is skipped.
fn scan_markers(text: &str) -> Vec<MarkerStart> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(rel) = text[i..].find("[!") {
        let start = i + rel;
        let tag_from = start + 2;
        match text[tag_from..].find("!]") {
            Some(tag_rel) => {
                let tag_end = tag_from + tag_rel;
                let after = tag_end + 2;
                let tag = &text[tag_from..tag_end];
                if text[after..].starts_with('(') && !tag.contains('\n') {
                    out.push(MarkerStart {
                        start,
                        payload_start: after + 1,
                        tag: tag.to_string(),
                    });
                    i = after + 1;
                } else {
                    i = tag_from;
                }
            }
            None => break,
        }
    }
    out
}

/// Extract the payload for a marker: up to the last `)` on the marker's line,
/// not crossing the next marker start.
fn payload_of<'a>(
    text: &'a str,
    marker: &MarkerStart,
    next_start: Option<usize>,
) -> Result<&'a str, ProtocolError> {
    let line_end = text[marker.payload_start..]
        .find('\n')
        .map(|p| marker.payload_start + p)
        .unwrap_or(text.len());
    let scope_end = match next_start {
        Some(n) if n > marker.payload_start => n.min(line_end),
        _ => line_end,
    };
    let region = &text[marker.payload_start..scope_end];
    let close = region
        .rfind(')')
        .ok_or_else(|| ProtocolError::UnterminatedPayload(marker.tag.clone()))?;
    Ok(&region[..close])
}

/// Parse a doctor reply into its Thought block and exactly one action.
///
/// `[!Exam!]` is accepted and normalized to [`DoctorAction::Test`]: the
/// environment routes both physical examinations and auxiliary tests to the
/// examiner. The original marker is preserved on the returned move.
pub fn parse_doctor_reply(text: &str) -> Result<DoctorMove, ProtocolError> {
    let markers = scan_markers(text);
    match markers.len() {
        0 => return Err(ProtocolError::NoActionMarker),
        1 => {}
        n => return Err(ProtocolError::MultipleActions(n)),
    }
    let marker = &markers[0];
    let kind = match marker.tag.as_str() {
        "Ask" => ActionMarker::Ask,
        "Exam" => ActionMarker::Exam,
        "Test" => ActionMarker::Test,
        "Diagnosis" => ActionMarker::Diagnosis,
        other => return Err(ProtocolError::UnknownMarker(other.to_string())),
    };
    let payload = payload_of(text, marker, None)?.trim();
    if payload.is_empty() {
        return Err(ProtocolError::EmptyPayload(marker.tag.clone()));
    }
    let action = match kind {
        ActionMarker::Ask => DoctorAction::Ask(payload.to_string()),
        ActionMarker::Exam | ActionMarker::Test => DoctorAction::Test(payload.to_string()),
        ActionMarker::Diagnosis => DoctorAction::Diag(payload.to_string()),
    };
    let thought = extract_thought(text, marker.start);
    Ok(DoctorMove {
        action,
        marker: kind,
        thought,
        raw: text.to_string(),
    })
}

/// The text between `Thought:` and the `Action:` line (or the action marker,
/// whichever comes first). Absent `Thought:` yields an empty block.
fn extract_thought(text: &str, marker_start: usize) -> String {
    let Some(pos) = text.find("Thought:") else {
        return String::new();
    };
    let from = pos + "Thought:".len();
    let until = text[from..]
        .find("Action:")
        .map(|p| from + p)
        .unwrap_or(marker_start.max(from));
    text[from..until.min(text.len())].trim().to_string()
}

/// Parse the `[!Positive!]`/`[!Negative!]` lines of an environment reply, in
/// document order. Text outside markers and markers with other tags are
/// ignored; a reply with zero findings is a protocol violation.
pub fn parse_finding_lines(text: &str) -> Result<Vec<FindingLine>, ProtocolError> {
    let markers = scan_markers(text);
    let mut findings = Vec::new();
    for (i, marker) in markers.iter().enumerate() {
        let polarity = match marker.tag.as_str() {
            "Positive" => Polarity::Positive,
            "Negative" => Polarity::Negative,
            _ => continue,
        };
        let next_start = markers.get(i + 1).map(|m| m.start);
        let Ok(payload) = payload_of(text, marker, next_start) else {
            continue;
        };
        let payload = payload.trim();
        if payload.is_empty() {
            continue;
        }
        findings.push(FindingLine {
            polarity,
            text: payload.to_string(),
        });
    }
    if findings.is_empty() {
        return Err(ProtocolError::NoFindingMarkers);
    }
    Ok(findings)
}

// ---------------------------------------------------------------------------
// Dialogue history
// ---------------------------------------------------------------------------

/// One history element. The opening turn has no doctor move; the final
/// diagnosis turn has no environment reply (the environment answers `End`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub doctor: Option<DoctorMove>,
    pub reply: Option<Utterance>,
}

/// Append-only utterance sequence. The first element is always the patient
/// opening; every later element pairs one doctor action with the environment
/// response it provoked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    opened: bool,
    turns: Vec<Turn>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record the chief complaint as `u_1`.
    pub fn open(&mut self, opening: Utterance) -> Result<(), ProtocolError> {
        if self.opened {
            return Err(ProtocolError::HistoryAlreadyOpened);
        }
        if opening.speaker != Speaker::Patient {
            return Err(ProtocolError::BadOpeningSpeaker);
        }
        self.turns.push(Turn {
            doctor: None,
            reply: Some(opening),
        });
        self.opened = true;
        Ok(())
    }

    /// Fold one (doctor action, environment utterance) pair onto the history.
    pub fn append(&mut self, mov: DoctorMove, reply: Utterance) -> Result<(), ProtocolError> {
        if !self.opened {
            return Err(ProtocolError::HistoryNotOpened);
        }
        self.turns.push(Turn {
            doctor: Some(mov),
            reply: Some(reply),
        });
        Ok(())
    }

    /// Record the terminal diagnosis turn; the environment response is `End`.
    pub fn append_end(&mut self, mov: DoctorMove) -> Result<(), ProtocolError> {
        if !self.opened {
            return Err(ProtocolError::HistoryNotOpened);
        }
        if !matches!(mov.action, DoctorAction::Diag(_)) {
            return Err(ProtocolError::EndWithoutDiag(mov.action.kind_label()));
        }
        self.turns.push(Turn {
            doctor: Some(mov),
            reply: None,
        });
        Ok(())
    }

    pub fn is_opened(&self) -> bool {
        self.opened
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Number of doctor actions taken, the final diagnosis included.
    pub fn doctor_turns(&self) -> u32 {
        self.turns.iter().filter(|t| t.doctor.is_some()).count() as u32
    }

    pub fn last_action(&self) -> Option<&DoctorAction> {
        self.turns
            .iter()
            .rev()
            .find_map(|t| t.doctor.as_ref().map(|m| &m.action))
    }

    fn findings(&self) -> impl Iterator<Item = &FindingLine> {
        self.turns
            .iter()
            .filter_map(|t| t.reply.as_ref())
            .flat_map(|u| u.findings.iter())
    }

    pub fn positive_findings(&self) -> u32 {
        self.findings()
            .filter(|f| f.polarity == Polarity::Positive)
            .count() as u32
    }

    pub fn negative_findings(&self) -> u32 {
        self.findings()
            .filter(|f| f.polarity == Polarity::Negative)
            .count() as u32
    }

    /// Transcript rendering for the `{chat_history}` slot: one
    /// `Speaker: text` line per utterance in turn order, markers stripped.
    pub fn render_chat_history(&self) -> String {
        let mut lines = Vec::new();
        for turn in &self.turns {
            if let Some(mov) = &turn.doctor {
                lines.push(format!("Doctor: {}", mov.action.payload()));
            }
            if let Some(reply) = &turn.reply {
                let speaker = match reply.speaker {
                    Speaker::Patient => "Patient",
                    Speaker::Examiner => "Examiner",
                    Speaker::Doctor => "Doctor",
                };
                lines.push(format!("{speaker}: {}", reply.plain_text()));
            }
        }
        lines.join("\n")
    }

    /// Transcript rendering for rubric scoring: includes the doctor's
    /// reasoning block and the action kind taken each turn.
    pub fn render_transcript_with_reasoning(&self) -> String {
        let mut lines = Vec::new();
        for turn in &self.turns {
            if let Some(mov) = &turn.doctor {
                if !mov.thought.is_empty() {
                    lines.push(format!("Doctor (Reasoning): {}", mov.thought));
                }
                lines.push(format!(
                    "Action [{}]: {}",
                    mov.action.kind_label(),
                    mov.action.payload()
                ));
            }
            if let Some(reply) = &turn.reply {
                let speaker = match reply.speaker {
                    Speaker::Patient => "Patient",
                    Speaker::Examiner => "Examiner",
                    Speaker::Doctor => "Doctor",
                };
                lines.push(format!("{speaker}: {}", reply.plain_text()));
            }
        }
        lines.join("\n")
    }
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

pub const DOCTOR_PROMPT: &str = r#"You are a professional physician. Based on the patient's consultation record, you must make a clinical judgment. Your goal is to simulate a routine outpatient visit: rule out similar diseases and diagnose the patient's condition. You may choose from the following actions:

1. Ask the patient for information, formatted as: [!Ask!](your question) — only one question per turn.
2. Perform a physical examination, formatted as: [!Exam!](the specific physical exam item you need) — only one item per turn.
3. Order an auxiliary test, formatted as: [!Test!](the specific test you require) — only one test per turn.
4. Provide a diagnosis, formatted as: [!Diagnosis!](your diagnosis) — must be a single, specific disease name.

You may perform only one action per turn. Once you issue a diagnosis, it will be considered your final answer, and you will no longer be able to ask additional questions or order further tests.

You must think before answering. Please strictly follow the response format below:

Thought: (your reasoning process)
Action: [!Ask!](your question) OR [!Exam!](your physical exam item) OR [!Test!](your test request) OR [!Diagnosis!](your diagnosis)

Consultation record as follows: {chat_history}

Based on this information, provide your thought and action. You may ask only one question or request only one test/exam."#;

pub const PATIENT_OPENING_PROMPT: &str = r#"You are a standardized patient who firmly believes you have the following illness: {disease_description}.

Based on this disease, simulate your first verbal complaint when meeting the doctor — designed to test the physician's diagnostic ability.

Instructions:
1. State only 1-2 main symptoms. Keep it simple and brief.
2. Do not reveal the diagnosis. Avoid disease names or textbook terms.
3. Only 1-2 sentences max. Preferably just one short, natural sentence.
4. Use colloquial, everyday language — as a real patient would speak. No medical jargon.
5. Withhold all other symptoms. Wait for the doctor to ask follow-up questions.

Example:
"I've had this nasty cough for over a week and I'm really tired all the time.""#;

pub const PATIENT_PROMPT: &str = r#"You are a standardized patient who firmly believes you have the following illness: {disease_description}.

Based on this disease description, carefully consider your symptoms and respond to the doctor's question: {doctor_question}.

Please follow these principles when answering:

1. Your answer should directly respond to the doctor's question. Simulate a real patient's response as realistically as possible, to evaluate the doctor's clinical competence.
2. Only answer the current question — no extra information. Avoid overly professional or obscure language. Do not include any irrelevant content.
3. Do not copy verbatim from the disease description above. Express your symptoms in colloquial, everyday, and layperson-friendly language.
4. If the doctor asks multiple questions at once, answer each one separately. Each answer must follow the above principles.
5. You must respond according to the doctor's specific request. If your existing information does not fully match the request, improvise an appropriate response based on the question and your assumed condition.
6. Strictly follow the output format below:

[!Positive!](your response) or [!Negative!](your response)

First, judge whether the doctor's question is relevant to your disease and whether the symptom mentioned applies to you. If relevant, begin with [!Positive!]. If not relevant, begin with [!Negative!]. Then state your response in natural language.

For multiple questions, respond to each on a separate line. Example:

[!Positive!](I feel a bit of pain in my chest.)
[!Negative!](I don't feel dizzy at all.)"#;

pub const EXAMINER_PROMPT: &str = r#"You are a medical technologist. Your task is to generate examination result reports based on the clinician's requested tests, the disease encyclopedia description, and existing patient information — combined with your own medical knowledge of the disease.

The patient's disease description is: {disease_description}

The examination(s) requested by the doctor: {doctor_examination}

For any examination lacking specific data, you must respond in the format of a professional hospital laboratory or diagnostic report. Based on the requested examination and your understanding of the disease, provide a medically plausible result description.

Guidelines:

1. Respond directly to the doctor's request — no additional information.
2. Describe results objectively. Do not include biased interpretations, disease names, or treatment suggestions.
3. For numerical results, only indicate: normal, elevated, or reduced — do not provide exact values.
4. For examinations unrelated to the disease, respond with "normal".
5. Strictly follow the output format:

[!Positive!](your result) or [!Negative!](your result)

6. Format your response as a professional hospital examination report. Include only the result for the current test item — no extraneous content.
7. If multiple tests are requested, respond to each one separately, one per line. Example:

[!Positive!](ECG result: Sinus rhythm, normal heart rate.)
[!Negative!](C-reactive protein: Within normal range.)"#;

/// Which agent a prompt is rendered for, with the strings that fill its
/// substitution slots.
#[derive(Debug, Clone, Copy)]
pub enum PromptRole<'a> {
    Doctor {
        chat_history: &'a str,
    },
    PatientOpening {
        disease_description: &'a str,
    },
    Patient {
        disease_description: &'a str,
        doctor_question: &'a str,
    },
    Examiner {
        disease_description: &'a str,
        doctor_examination: &'a str,
    },
}

/// Render the prompt for one agent role with all slots substituted verbatim.
pub fn render_prompt(role: PromptRole<'_>) -> Result<String, ProtocolError> {
    let rendered = match role {
        PromptRole::Doctor { chat_history } => fill_template(
            DOCTOR_PROMPT,
            &[("chat_history", chat_history)],
            &["chat_history"],
        )?,
        PromptRole::PatientOpening {
            disease_description,
        } => fill_template(
            PATIENT_OPENING_PROMPT,
            &[("disease_description", disease_description)],
            &["disease_description"],
        )?,
        PromptRole::Patient {
            disease_description,
            doctor_question,
        } => fill_template(
            PATIENT_PROMPT,
            &[
                ("disease_description", disease_description),
                ("doctor_question", doctor_question),
            ],
            &["disease_description", "doctor_question"],
        )?,
        PromptRole::Examiner {
            disease_description,
            doctor_examination,
        } => fill_template(
            EXAMINER_PROMPT,
            &[
                ("disease_description", disease_description),
                ("doctor_examination", doctor_examination),
            ],
            &["disease_description", "doctor_examination"],
        )?,
    };
    Ok(rendered)
}
