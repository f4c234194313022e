//! Rubric-based diagnostic quality scoring.
//!
//! A panel of five judge backends scores each transcript on seven bounded
//! dimensions; per dimension the panel is aggregated with a trimmed mean
//! (drop one max and one min, average the remaining three). The diagnostic
//! quality score (DQS) is the weighted sum of normalized dimension scores on
//! a 0-100 scale; with the default weights it equals the plain sum of raw
//! dimension points.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::orchestrator::{SessionOutcome, SessionRecord};
use crate::template::{fill_template, TemplateError};

pub const PANEL_SIZE: usize = 5;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("judge panel must have exactly {PANEL_SIZE} backends, got {0}")]
    PanelSize(usize),
    #[error("no JSON score document found in judge reply")]
    MalformedDocument,
    #[error("score document is missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` must be an integer score, got `{value}`")]
    NonIntegerScore { field: &'static str, value: String },
    #[error("field `{field}` value {value} outside 0..={max}")]
    BoundViolation {
        field: &'static str,
        value: i64,
        max: u8,
    },
    #[error("dimension weights must sum to 1, got {0}")]
    BadWeights(f64),
    #[error("judge {index} ({model}) failed after re-prompt: {reason}")]
    PanelFailure {
        index: usize,
        model: String,
        reason: String,
    },
    #[error("judge backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("session `{0}` ended in protocol failure and cannot be scored")]
    UnscorableSession(String),
}

// ---------------------------------------------------------------------------
// Dimensions
// ---------------------------------------------------------------------------

/// The seven rubric dimensions, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    /// Chief complaint exploration.
    Cce,
    /// History completeness.
    Hc,
    /// Evidence chain integrity.
    Eci,
    /// Test justification.
    Tj,
    /// Differential diagnosis.
    Ddx,
    /// Diagnostic correctness.
    Dc,
    /// Diagnostic uncertainty.
    Du,
}

impl Dimension {
    pub const ALL: [Dimension; 7] = [
        Dimension::Cce,
        Dimension::Hc,
        Dimension::Eci,
        Dimension::Tj,
        Dimension::Ddx,
        Dimension::Dc,
        Dimension::Du,
    ];

    pub fn max_points(self) -> u8 {
        match self {
            Dimension::Cce | Dimension::Hc | Dimension::Tj | Dimension::Ddx | Dimension::Du => 10,
            Dimension::Eci => 20,
            Dimension::Dc => 30,
        }
    }

    /// Exact field name in the judge score document.
    pub fn json_key(self) -> &'static str {
        match self {
            Dimension::Cce => "Depth of Chief Complaint Inquiry",
            Dimension::Hc => "Completeness of Medical History",
            Dimension::Eci => "Integrity of Evidence Chain",
            Dimension::Tj => "Appropriateness of Examinations",
            Dimension::Ddx => "Differential Diagnosis",
            Dimension::Dc => "Diagnostic Accuracy",
            Dimension::Du => "Uncertainty Management",
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Dimension::Cce => "CCE",
            Dimension::Hc => "HC",
            Dimension::Eci => "ECI",
            Dimension::Tj => "TJ",
            Dimension::Ddx => "DDx",
            Dimension::Dc => "DC",
            Dimension::Du => "DU",
        }
    }

    fn index(self) -> usize {
        Dimension::ALL.iter().position(|d| *d == self).unwrap()
    }
}

/// One judge's integer scores, each within its dimension bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScore {
    pub cce: u8,
    pub hc: u8,
    pub eci: u8,
    pub tj: u8,
    pub ddx: u8,
    pub dc: u8,
    pub du: u8,
}

impl RubricScore {
    pub fn new(values: [u8; 7]) -> Result<Self, JudgeError> {
        for (dim, &v) in Dimension::ALL.iter().zip(values.iter()) {
            if v > dim.max_points() {
                return Err(JudgeError::BoundViolation {
                    field: dim.json_key(),
                    value: v as i64,
                    max: dim.max_points(),
                });
            }
        }
        let [cce, hc, eci, tj, ddx, dc, du] = values;
        Ok(Self {
            cce,
            hc,
            eci,
            tj,
            ddx,
            dc,
            du,
        })
    }

    pub fn get(&self, dim: Dimension) -> u8 {
        match dim {
            Dimension::Cce => self.cce,
            Dimension::Hc => self.hc,
            Dimension::Eci => self.eci,
            Dimension::Tj => self.tj,
            Dimension::Ddx => self.ddx,
            Dimension::Dc => self.dc,
            Dimension::Du => self.du,
        }
    }
}

/// Panel-aggregated dimension values (real-valued after trimming).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRubric {
    pub values: [f64; 7],
}

impl AggregatedRubric {
    pub fn get(&self, dim: Dimension) -> f64 {
        self.values[dim.index()]
    }
}

// ---------------------------------------------------------------------------
// Weights and DQS
// ---------------------------------------------------------------------------

/// Dimension weights for the DQS. Stored as the contribution of one raw
/// point per dimension to the 0-100 scale, so the default (weights
/// proportional to the rubric's maximum points) is exactly 1.0 per point and
/// the default DQS is exactly the raw dimension sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionWeights {
    per_point: [f64; 7],
}

impl Default for DimensionWeights {
    fn default() -> Self {
        Self {
            per_point: [1.0; 7],
        }
    }
}

impl DimensionWeights {
    /// Custom weights, one per dimension in canonical order; must sum to 1.
    pub fn new(weights: [f64; 7]) -> Result<Self, JudgeError> {
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
            return Err(JudgeError::BadWeights(sum));
        }
        let mut per_point = [0.0; 7];
        for (i, dim) in Dimension::ALL.iter().enumerate() {
            per_point[i] = weights[i] * 100.0 / dim.max_points() as f64;
        }
        Ok(Self { per_point })
    }

    /// The weight of one dimension (the default reproduces max_points/100).
    pub fn weight(&self, dim: Dimension) -> f64 {
        self.per_point[dim.index()] * dim.max_points() as f64 / 100.0
    }
}

/// Diagnostic quality score on a 0-100 scale: the weighted sum of normalized
/// dimension scores. Default weights make this the plain sum of the seven
/// raw dimension points.
pub fn dqs(score: &RubricScore, weights: &DimensionWeights) -> f64 {
    Dimension::ALL
        .iter()
        .enumerate()
        .map(|(i, dim)| weights.per_point[i] * score.get(*dim) as f64)
        .sum()
}

/// DQS over panel-aggregated (real-valued) dimension scores.
pub fn dqs_aggregated(score: &AggregatedRubric, weights: &DimensionWeights) -> f64 {
    score
        .values
        .iter()
        .zip(weights.per_point.iter())
        .map(|(v, w)| v * w)
        .sum()
}

// ---------------------------------------------------------------------------
// Judge prompt
// ---------------------------------------------------------------------------

pub const JUDGE_PROMPT: &str = r#"You are a senior clinical expert with over 15 years of clinical experience. You are now appointed to conduct a rigorous professional evaluation of the following doctor's consultation record and clinical reasoning process. Your scoring will be used for medical quality retrospective analysis and case review, and you must ensure that the scoring criteria are aligned with clinical practice requirements.

Please score the consultation content item by item according to the following 7 dimensions. Each score must be an integer and determined based on clear evidence of clinical behavior. The basis for scoring must strictly follow the standards listed below, without any lenient interpretation or subjective inference.

Output Format Requirements:
- Output only standard JSON. The field order and structure must be strictly as follows, with no comments, line breaks, or extra text:
{
  "Depth of Chief Complaint Inquiry": score,
  "Completeness of Medical History": score,
  "Integrity of Evidence Chain": score,
  "Appropriateness of Examinations": score,
  "Differential Diagnosis": score,
  "Diagnostic Accuracy": score,
  "Uncertainty Management": score
}

Scoring Dimensions and Attainment Standards:

1. Depth of Chief Complaint Inquiry (Max 10 points)
   - 10 points: Structurally collected symptom characteristics (onset, nature, location, intensity, triggers, relieving factors, associated symptoms), and identified at least one "red flag" sign (e.g., chest pain with cold sweats, headache with altered consciousness).
   - 6 points: Covered basic symptom elements but did not systematically inquire about specific features or failed to identify red flags.
   - 4 points: Only recorded the patient's own words without clarifying vague descriptions (e.g., "stomach discomfort" without specifying location/nature).
   - 2 points: The description of the chief complaint is general, omitting key symptom dimensions.
   - 0 points: Failed to identify symptoms requiring emergency intervention (e.g., did not ask about radiation for chest pain, or respiratory distress at rest).
   - Deduction Triggers: Failure to actively probe -> max 3 points; Failure to record symptom duration or frequency -> max 2 points.

2. Completeness of Medical History (Max 10 points)
   - Medical history includes: history of present illness, past medical history, medication history, allergy history, family history, and social history. 2 points are awarded for each section covered, up to a maximum of 10 points.

3. Integrity of Evidence Chain (Max 20 points)
   - 20 points: Every clinical judgment (e.g., "considering infection," "leaning towards cardiogenic") is supported by corresponding symptoms, signs, or examination results. The reasoning chain is complete and logical.
   - 15 points: One judgment is weakly supported by evidence (e.g., diagnosing "pneumonia" without fever or lung auscultation records).
   - 10 points: Key diagnostic hypotheses lack direct evidence (e.g., diagnosing "cholecystitis" without recording Murphy's sign).
   - 5 points: Subjective inferences are present (e.g., "patient is anxious" without a HAMA score or behavioral description).
   - <=2 points: Multiple conclusions lack objective basis, or non-evidence-based statements like "based on experience" or "it feels like" are used.
   - Deduction Triggers: Using "possibly" or "maybe" without noting the uncertainty -> max 3 points; Diagnosis contradicts recorded information -> 0 points.

4. Appropriateness of Examinations (Max 10 points)
   - 10 points: Examinations are precisely matched with differential diagnoses, comply with clinical pathways/guidelines, no core tests are missed, no unnecessary over-testing, and indications for tests are clearly recorded.
   - 8 points: One test has an unclear indication, or one low-priority test is delayed (e.g., not immediately checking amylase for general abdominal pain).
   - 6 points: Obvious over-testing (e.g., ordering an MRI for a young patient with a headache without indications) or omission of high-risk screening (e.g., not checking for pregnancy in a woman of childbearing age with abdominal pain).
   - 4 points: Tests are weakly related to the chief complaint or their clinical purpose is not stated.
   - <=2 points: The combination of tests is illogical, or key tests for high-risk patients are not prioritized (e.g., not performing an ECG for chest pain).
   - Deduction Triggers: Failure to state the purpose of a test -> -1 point; Failure to arrange core tests for a critical patient at the first visit -> max 2 points.

5. Differential Diagnosis (Max 10 points)
   - 10 points: Listed >=3 reasonable differential diagnoses, including "highly lethal but treatable" conditions (e.g., ACS, pulmonary embolism, stroke, ectopic pregnancy), ranked by clinical probability, with supporting or refuting evidence for each.
   - 8 points: Listed 3 differential diagnoses but without ranking or with insufficient justification for exclusion.
   - 6 points: Listed only 2 differential diagnoses, failing to include a must-not-miss critical condition.
   - 3-5 points: Listed only 1 differential diagnosis, or the differential is clearly unreasonable.
   - <=3 points: No differential diagnosis was made, or a "red flag" disease that must be ruled out was missed.
   - Deduction Triggers: Failure to consider the most dangerous diagnosis for the symptom spectrum (e.g., not considering subarachnoid hemorrhage for a headache) -> 0 points.

6. Diagnostic Accuracy (Max 30 points)
   - 30 points: The final diagnosis is highly consistent with all clinical evidence, aligns with the latest clinical guidelines, and has no logical contradictions. If evidence is insufficient, it is clearly marked as a "preliminary diagnosis" or "to be ruled out," with justification.
   - 20-29 points: The diagnosis is correct but the confidence level is not fully explained, key differentials are not systematically excluded, or the "preliminary" status is not marked when evidence is slightly insufficient.
   - 15-20 points: The diagnosis is generally correct but omits important comorbidities or complications (e.g., pneumonia without mentioning pleural effusion, diabetes without mentioning ketosis proneness), or some inferences lack direct evidence.
   - 10-15 points: The diagnostic direction is partially incorrect or vague (e.g., misdiagnosing "cholecystitis" as "gastritis"), but does not involve missing a high-risk disease and does not lead to significant clinical risk.
   - 5-9 points: The diagnosis contradicts key positive signs/test results (e.g., diagnosing gastritis when ECG suggests MI), or ignores red flags that must be addressed.
   - 0-4 points: The diagnosis is seriously wrong, potentially leading to life-threatening danger or irreversible harm (e.g., misdiagnosing "aortic dissection" as "muscle strain," "ectopic pregnancy" as "irregular menstruation").
   - Deduction Triggers:
     - Diagnosis contradicts objective records -> score is directly <=4 points.
     - Insufficient evidence but not labeled as "preliminary diagnosis" -> max 25 points.
     - Missing a "must-not-miss" high-risk disease (e.g., not considering ACS for chest pain) -> max 17 points.
     - Using a vague diagnosis to cover uncertainty (e.g., "it could be XX" without a verification plan) -> max 24 points.

7. Uncertainty Management (Max 10 points)
   - 10 points: Clearly identified the source of uncertainty in diagnosis or prognosis, developed a specific verification plan (e.g., "follow-up within 72 hours," "upgrade to imaging if no improvement"), and documented risk communication with the patient.
   - 7 points: Mentioned uncertainty and has a follow-up plan, but without quantified timeframes or verification methods.
   - 5-6 points: Used only vague terms like "observe" or "follow-up" with no specific action items.
   - 3-4 points: Used absolute language to conceal uncertainty (e.g., "it's definitely not cancer," "no problem").
   - <=2 points: Completely failed to mention uncertainty or gave the patient misleading assurances.
   - Deduction Triggers: Failure to document risk communication or the informed consent process -> max 3 points; Failure to arrange a clear follow-up mechanism for a high-risk patient -> max 4 points.

Reiteration of Evaluation Principles:
- All scoring must be based on verifiable text records. Do not assume "the doctor might have done it but didn't write it down."
- High-weight dimensions (Diagnostic Accuracy, Differential Diagnosis, Diagnostic Uncertainty) use a "defect-sensitive" scoring method — a critical omission or error will lead to a sharp drop in the score.
- As the evaluating expert, your scores will be entered into the physician's competency file and the medical safety database. You are responsible for the clinical reasonableness and legal rigor of your evaluation.

Please evaluate the following consultation record based on the above criteria:
Consultation Record: {dialogue}

The model's diagnosis is: {model_diagnosis}
The correct answer is: {diagnosis}

Please provide your answer. Do not include any content other than the JSON formatted score."#;

const JUDGE_FORMAT_REMINDER: &str = "Your previous reply was not a valid score document. Output only the standard JSON object with the seven integer score fields, nothing else.";

/// Render the judge prompt with the transcript, ground truth, and the
/// model's final diagnosis substituted.
pub fn render_judge_prompt(
    transcript: &str,
    ground_truth: &str,
    predicted: &str,
) -> Result<String, JudgeError> {
    if transcript.trim().is_empty() {
        return Err(JudgeError::EmptyTranscript);
    }
    Ok(fill_template(
        JUDGE_PROMPT,
        &[
            ("dialogue", transcript),
            ("model_diagnosis", predicted),
            ("diagnosis", ground_truth),
        ],
        &["dialogue", "model_diagnosis", "diagnosis"],
    )?)
}

// ---------------------------------------------------------------------------
// Score parsing
// ---------------------------------------------------------------------------

/// Extract the outermost braced document from prose.
fn braced_document(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Parse a judge reply into a bounded rubric score. Surrounding prose is
/// tolerated; missing fields, non-integer values, and out-of-bound scores
/// are rejected.
pub fn parse_judge_scores(text: &str) -> Result<RubricScore, JudgeError> {
    let doc = braced_document(text).ok_or(JudgeError::MalformedDocument)?;
    let parsed: serde_json::Value =
        serde_json::from_str(doc).map_err(|_| JudgeError::MalformedDocument)?;
    let object = parsed.as_object().ok_or(JudgeError::MalformedDocument)?;
    let mut values = [0u8; 7];
    for (i, dim) in Dimension::ALL.iter().enumerate() {
        let key = dim.json_key();
        let raw = object.get(key).ok_or(JudgeError::MissingField(key))?;
        let value = raw.as_i64().ok_or_else(|| JudgeError::NonIntegerScore {
            field: key,
            value: raw.to_string(),
        })?;
        if value < 0 || value > dim.max_points() as i64 {
            return Err(JudgeError::BoundViolation {
                field: key,
                value,
                max: dim.max_points(),
            });
        }
        values[i] = value as u8;
    }
    RubricScore::new(values)
}

// ---------------------------------------------------------------------------
// Panel aggregation
// ---------------------------------------------------------------------------

/// Per dimension independently: drop one maximum occurrence and one minimum
/// occurrence of the five judge values, then average the remaining three.
pub fn trimmed_mean_panel(panel: &[RubricScore]) -> Result<AggregatedRubric, JudgeError> {
    if panel.len() != PANEL_SIZE {
        return Err(JudgeError::PanelSize(panel.len()));
    }
    let mut values = [0.0; 7];
    for (i, dim) in Dimension::ALL.iter().enumerate() {
        let mut scores: Vec<u8> = panel.iter().map(|s| s.get(*dim)).collect();
        scores.sort_unstable();
        let retained = &scores[1..PANEL_SIZE - 1];
        values[i] = retained.iter().map(|&v| v as f64).sum::<f64>() / retained.len() as f64;
    }
    Ok(AggregatedRubric { values })
}

// ---------------------------------------------------------------------------
// Transcript scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgePanelResult {
    pub per_judge: Vec<RubricScore>,
    pub aggregated: AggregatedRubric,
    pub dqs: f64,
    /// True when the scored transcript ended in a timeout rather than a
    /// diagnosis; such transcripts are scorable but flagged.
    pub timeout_transcript: bool,
}

fn judge_once(
    judge: &dyn ChatBackend,
    index: usize,
    prompt: &str,
) -> Result<RubricScore, JudgeError> {
    let reply = judge.complete(&ChatRequest::user_prompt(judge.model_id(), prompt))?;
    match parse_judge_scores(&reply) {
        Ok(score) => Ok(score),
        Err(_) => {
            let retry_prompt = format!("{prompt}\n\n{JUDGE_FORMAT_REMINDER}");
            let reply = judge.complete(&ChatRequest::user_prompt(judge.model_id(), retry_prompt))?;
            parse_judge_scores(&reply).map_err(|err| JudgeError::PanelFailure {
                index,
                model: judge.model_id().to_string(),
                reason: err.to_string(),
            })
        }
    }
}

/// Score one session transcript with a five-judge panel: render the prompt
/// once, query all judges (one re-prompt each on a malformed score
/// document), aggregate with the trimmed mean, and compute the DQS.
pub fn score_transcript(
    record: &SessionRecord,
    judges: &[Arc<dyn ChatBackend>],
    weights: &DimensionWeights,
) -> Result<JudgePanelResult, JudgeError> {
    if judges.len() != PANEL_SIZE {
        return Err(JudgeError::PanelSize(judges.len()));
    }
    let (predicted, timeout_transcript) = match &record.outcome {
        SessionOutcome::Diagnosed { disease_name, .. } => (disease_name.clone(), false),
        SessionOutcome::Timeout => (
            "(no diagnosis stated within the turn limit)".to_string(),
            true,
        ),
        SessionOutcome::ProtocolFailure { .. } => {
            return Err(JudgeError::UnscorableSession(record.case_id.clone()))
        }
    };
    let transcript = record.history.render_transcript_with_reasoning();
    let prompt = render_judge_prompt(&transcript, &record.case_ref.disease_name, &predicted)?;

    let mut results: Vec<Option<Result<RubricScore, JudgeError>>> =
        (0..PANEL_SIZE).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (slot, (index, judge)) in results.iter_mut().zip(judges.iter().enumerate()) {
            let prompt = &prompt;
            scope.spawn(move || {
                *slot = Some(judge_once(judge.as_ref(), index, prompt));
            });
        }
    });
    let per_judge = results
        .into_iter()
        .map(|r| r.expect("judge thread completed"))
        .collect::<Result<Vec<RubricScore>, JudgeError>>()?;

    let aggregated = trimmed_mean_panel(&per_judge)?;
    let dqs = dqs_aggregated(&aggregated, weights);
    Ok(JudgePanelResult {
        per_judge,
        aggregated,
        dqs,
        timeout_transcript,
    })
}

// ---------------------------------------------------------------------------
// Transcript verification (leakage / fidelity review)
// ---------------------------------------------------------------------------

pub const VERIFICATION_PROMPT: &str = r#"Please rigorously assess whether the "patient statements" and "examination findings" in the following dialogue satisfy the following two criteria:

1. Clinical Fidelity: whether the patient's self-reported symptoms and examination findings are consistent with the typical clinical presentation or medical logic of the disease "{diagnosis}". The chief complaint, symptoms, physical signs, and auxiliary test results should align with established medical knowledge regarding this condition. Irrelevant questions or unnecessary tests ordered by the doctor should not affect your judgment; you are evaluating only whether the patient's and examiner's responses themselves are medically coherent.

2. Information Leakage: whether the patient or examination results explicitly or implicitly reveal the ground-truth diagnosis before the doctor infers it. Reasonable symptom descriptions that match the disease but do not name it are acceptable; explicit statements of the diagnosis constitute leakage. If a test naturally contains a diagnostic conclusion (e.g., pathology results, radiology impression), this is considered medically appropriate and does not count as leakage.

Please output your decision in the following strict JSON format:

{
  "Medical_Plausibility": 0 or 1,
  "No_Diagnostic_Leakage": 0 or 1
}

Dialogue content: {dialogue}

Ground-truth diagnosis: {diagnosis}"#;

/// Binary review labels for one transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationLabels {
    pub medical_plausibility: bool,
    pub no_diagnostic_leakage: bool,
}

pub fn render_verification_prompt(dialogue: &str, diagnosis: &str) -> Result<String, JudgeError> {
    if dialogue.trim().is_empty() {
        return Err(JudgeError::EmptyTranscript);
    }
    Ok(fill_template(
        VERIFICATION_PROMPT,
        &[("dialogue", dialogue), ("diagnosis", diagnosis)],
        &["dialogue", "diagnosis"],
    )?)
}

/// Parse the strict two-field verification document.
pub fn parse_verification_labels(text: &str) -> Result<VerificationLabels, JudgeError> {
    let doc = braced_document(text).ok_or(JudgeError::MalformedDocument)?;
    let parsed: serde_json::Value =
        serde_json::from_str(doc).map_err(|_| JudgeError::MalformedDocument)?;
    let object = parsed.as_object().ok_or(JudgeError::MalformedDocument)?;
    let bit = |key: &'static str| -> Result<bool, JudgeError> {
        let raw = object.get(key).ok_or(JudgeError::MissingField(key))?;
        match raw.as_i64() {
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            _ => Err(JudgeError::NonIntegerScore {
                field: key,
                value: raw.to_string(),
            }),
        }
    };
    Ok(VerificationLabels {
        medical_plausibility: bit("Medical_Plausibility")?,
        no_diagnostic_leakage: bit("No_Diagnostic_Leakage")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::orchestrator::{CaseRef, SessionConfig, SessionBackends};
    use proptest::prelude::*;

    fn score_doc(values: [i64; 7]) -> String {
        let keys: Vec<&str> = Dimension::ALL.iter().map(|d| d.json_key()).collect();
        let fields: Vec<String> = keys
            .iter()
            .zip(values.iter())
            .map(|(k, v)| format!("  \"{k}\": {v}"))
            .collect();
        format!("{{\n{}\n}}", fields.join(",\n"))
    }

    #[test]
    fn judge_prompt_contains_field_names_and_diagnosis_lines() {
        let prompt = render_judge_prompt("Patient: hi", "Lens Dislocation", "Cataract").unwrap();
        for dim in Dimension::ALL {
            assert!(prompt.contains(dim.json_key()), "missing {}", dim.json_key());
        }
        assert!(prompt.contains("The model's diagnosis is: Cataract"));
        assert!(prompt.contains("The correct answer is: Lens Dislocation"));
    }

    #[test]
    fn judge_prompts_differ_only_in_slots() {
        let a = render_judge_prompt("T1", "Truth", "Pred").unwrap();
        let b = render_judge_prompt("T2", "Truth", "Pred").unwrap();
        assert_eq!(a.replace("Consultation Record: T1", "Consultation Record: T2"), b);
    }

    #[test]
    fn empty_transcript_is_rejected() {
        assert!(matches!(
            render_judge_prompt("  ", "t", "p"),
            Err(JudgeError::EmptyTranscript)
        ));
    }

    #[test]
    fn parses_strict_seven_field_document() {
        let score = parse_judge_scores(&score_doc([6, 4, 18, 9, 8, 30, 6])).unwrap();
        assert_eq!(score, RubricScore::new([6, 4, 18, 9, 8, 30, 6]).unwrap());
    }

    #[test]
    fn tolerates_surrounding_prose() {
        let text = format!("Here is my assessment.\n{}\nThank you.", score_doc([1, 2, 3, 4, 5, 6, 7]));
        let score = parse_judge_scores(&text).unwrap();
        assert_eq!(score.du, 7);
    }

    #[test]
    fn out_of_bound_score_is_rejected() {
        let err = parse_judge_scores(&score_doc([6, 4, 18, 9, 8, 31, 6])).unwrap_err();
        match err {
            JudgeError::BoundViolation { field, value, max } => {
                assert_eq!(field, "Diagnostic Accuracy");
                assert_eq!(value, 31);
                assert_eq!(max, 30);
            }
            other => panic!("expected bound violation, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_rejected_by_name() {
        let doc = score_doc([6, 4, 18, 9, 8, 30, 6]).replace("\"Uncertainty Management\": 6", "\"Extra\": 6");
        let err = parse_judge_scores(&doc).unwrap_err();
        assert!(matches!(err, JudgeError::MissingField("Uncertainty Management")));
    }

    #[test]
    fn non_integer_score_is_rejected() {
        let doc = score_doc([6, 4, 18, 9, 8, 30, 6]).replace(": 18", ": 17.5");
        assert!(matches!(
            parse_judge_scores(&doc),
            Err(JudgeError::NonIntegerScore { .. })
        ));
    }

    #[test]
    fn prose_without_braces_is_malformed() {
        assert!(matches!(
            parse_judge_scores("I refuse to answer in JSON."),
            Err(JudgeError::MalformedDocument)
        ));
    }

    #[test]
    fn default_dqs_equals_raw_dimension_sum() {
        let w = DimensionWeights::default();
        assert_eq!(dqs(&RubricScore::new([6, 4, 18, 9, 8, 30, 6]).unwrap(), &w), 81.0);
        assert_eq!(dqs(&RubricScore::new([0; 7]).unwrap(), &w), 0.0);
        assert_eq!(dqs(&RubricScore::new([10, 10, 20, 10, 10, 30, 10]).unwrap(), &w), 100.0);
    }

    #[test]
    fn default_weights_reproduce_rubric_proportions() {
        let w = DimensionWeights::default();
        assert!((w.weight(Dimension::Dc) - 0.30).abs() < 1e-12);
        assert!((w.weight(Dimension::Eci) - 0.20).abs() < 1e-12);
        assert!((w.weight(Dimension::Cce) - 0.10).abs() < 1e-12);
        let total: f64 = Dimension::ALL.iter().map(|d| w.weight(*d)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn custom_weights_must_sum_to_one() {
        assert!(matches!(
            DimensionWeights::new([0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]),
            Err(JudgeError::BadWeights(_))
        ));
        let equal = DimensionWeights::new([1.0 / 7.0; 7]).unwrap();
        let full = RubricScore::new([10, 10, 20, 10, 10, 30, 10]).unwrap();
        assert!((dqs(&full, &equal) - 100.0).abs() < 1e-9);
    }

    fn uniform_panel(value_sets: [[u8; 7]; 5]) -> Vec<RubricScore> {
        value_sets
            .iter()
            .map(|v| RubricScore::new(*v).unwrap())
            .collect()
    }

    #[test]
    fn trimmed_mean_drops_one_extreme_each_side() {
        let panel = uniform_panel([
            [3, 5, 0, 10, 5, 3, 5],
            [5, 5, 10, 10, 5, 5, 5],
            [6, 5, 10, 10, 5, 6, 5],
            [7, 5, 10, 10, 5, 7, 5],
            [9, 5, 20, 10, 5, 9, 5],
        ]);
        let agg = trimmed_mean_panel(&panel).unwrap();
        assert_eq!(agg.get(Dimension::Cce), 6.0);
        assert_eq!(agg.get(Dimension::Hc), 5.0);
        assert_eq!(agg.get(Dimension::Eci), 10.0);
    }

    #[test]
    fn panel_size_must_be_five() {
        let panel = uniform_panel([[5; 7]; 5]);
        assert!(trimmed_mean_panel(&panel[..4]).is_err());
        assert!(trimmed_mean_panel(&panel).is_ok());
    }

    fn scored_record(outcome_diagnosed: bool) -> SessionRecord {
        let case = crate::orchestrator::SessionCase {
            case_id: "case-0000".into(),
            profile: crate::casegen::CaseProfile {
                disease_id: "lens".into(),
                disease_text: "Displacement of the crystalline lens.".into(),
                demographics: crate::casegen::DemographicProfile {
                    age: 40,
                    gender: "Male".into(),
                    occupation: "Clerk".into(),
                    history_notes: String::new(),
                },
                symptoms: vec![crate::casegen::SymptomManifestation {
                    category: "Visual".into(),
                    manifestation: "blurred vision".into(),
                    trend: crate::casegen::Trend::Worsening,
                }],
                raw_document: "doc".into(),
            },
            truth: CaseRef {
                disease_id: "lens".into(),
                disease_name: "Lens Dislocation".into(),
                aliases: vec![],
            },
        };
        let doctor: Vec<String> = if outcome_diagnosed {
            vec!["Thought: clear.\nAction: [!Diagnosis!](Lens Dislocation)".into()]
        } else {
            vec!["Action: [!Ask!](anything?)".into()]
        };
        let backends = SessionBackends {
            doctor: std::sync::Arc::new(ScriptedBackend::new(doctor)),
            patient: std::sync::Arc::new(ScriptedBackend::new(vec![
                "My vision is blurry.".to_string(),
                "[!Negative!](no)".to_string(),
            ])),
            examiner: std::sync::Arc::new(ScriptedBackend::new(Vec::<String>::new())),
        };
        let config = SessionConfig {
            t_max: if outcome_diagnosed { 15 } else { 1 },
            ..Default::default()
        };
        crate::orchestrator::run_session(&case, &backends, &config)
    }

    fn panel_of(scripts: [Vec<String>; 5]) -> Vec<Arc<dyn ChatBackend>> {
        scripts
            .into_iter()
            .map(|s| Arc::new(ScriptedBackend::new(s)) as Arc<dyn ChatBackend>)
            .collect()
    }

    #[test]
    fn five_agreeing_judges_yield_the_fixture_dqs() {
        let record = scored_record(true);
        let judges = panel_of(std::array::from_fn(|_| vec![score_doc([6, 4, 18, 9, 8, 30, 6])]));
        let result = score_transcript(&record, &judges, &DimensionWeights::default()).unwrap();
        assert_eq!(result.dqs, 81.0);
        assert!(!result.timeout_transcript);
        assert_eq!(result.per_judge.len(), 5);
    }

    #[test]
    fn divergent_dc_values_are_trimmed() {
        let record = scored_record(true);
        let dc_values = [25, 30, 30, 30, 4];
        let judges = panel_of(std::array::from_fn(|i| {
            vec![score_doc([6, 4, 18, 9, 8, dc_values[i], 6])]
        }));
        let result = score_transcript(&record, &judges, &DimensionWeights::default()).unwrap();
        let expected_dc = (25.0 + 30.0 + 30.0) / 3.0;
        assert!((result.aggregated.get(Dimension::Dc) - expected_dc).abs() < 1e-12);
        assert!((result.aggregated.get(Dimension::Dc) - 28.333333333333332).abs() < 1e-9);
    }

    #[test]
    fn judge_returning_prose_twice_fails_the_panel() {
        let record = scored_record(true);
        let good = score_doc([6, 4, 18, 9, 8, 30, 6]);
        let judges = panel_of([
            vec![good.clone()],
            vec![good.clone()],
            vec!["no json".into(), "still no json".into()],
            vec![good.clone()],
            vec![good],
        ]);
        let err = score_transcript(&record, &judges, &DimensionWeights::default()).unwrap_err();
        assert!(matches!(err, JudgeError::PanelFailure { index: 2, .. }));
    }

    #[test]
    fn malformed_first_reply_recovers_after_reprompt() {
        let record = scored_record(true);
        let good = score_doc([6, 4, 18, 9, 8, 30, 6]);
        let judges = panel_of([
            vec!["oops".into(), good.clone()],
            vec![good.clone()],
            vec![good.clone()],
            vec![good.clone()],
            vec![good],
        ]);
        let result = score_transcript(&record, &judges, &DimensionWeights::default()).unwrap();
        assert_eq!(result.dqs, 81.0);
    }

    #[test]
    fn timeout_transcripts_are_scorable_but_flagged() {
        let record = scored_record(false);
        let judges = panel_of(std::array::from_fn(|_| vec![score_doc([2, 2, 5, 4, 0, 4, 1])]));
        let result = score_transcript(&record, &judges, &DimensionWeights::default()).unwrap();
        assert!(result.timeout_transcript);
        assert_eq!(result.dqs, 18.0);
    }

    #[test]
    fn verification_prompt_and_labels_round_trip() {
        let prompt = render_verification_prompt("Patient: hello", "Rickets").unwrap();
        assert!(prompt.contains("Clinical Fidelity"));
        assert!(prompt.contains("Information Leakage"));
        assert!(prompt.contains("Ground-truth diagnosis: Rickets"));
        let labels = parse_verification_labels(
            "{\"Medical_Plausibility\": 1, \"No_Diagnostic_Leakage\": 0}",
        )
        .unwrap();
        assert!(labels.medical_plausibility);
        assert!(!labels.no_diagnostic_leakage);
        assert!(parse_verification_labels("{\"Medical_Plausibility\": 2}").is_err());
    }

    fn arb_rubric() -> impl Strategy<Value = RubricScore> {
        (
            0u8..=10,
            0u8..=10,
            0u8..=20,
            0u8..=10,
            0u8..=10,
            0u8..=30,
            0u8..=10,
        )
            .prop_map(|(cce, hc, eci, tj, ddx, dc, du)| {
                RubricScore::new([cce, hc, eci, tj, ddx, dc, du]).unwrap()
            })
    }

    proptest! {
        #[test]
        fn dqs_equals_dimension_sum_for_all_valid_scores(score in arb_rubric()) {
            let w = DimensionWeights::default();
            let sum: f64 = Dimension::ALL.iter().map(|d| score.get(*d) as f64).sum();
            prop_assert_eq!(dqs(&score, &w), sum);
        }

        #[test]
        fn trimmed_mean_is_permutation_invariant_and_bounded(
            panel in proptest::collection::vec(arb_rubric(), 5),
            rotation in 0usize..5,
        ) {
            let agg = trimmed_mean_panel(&panel).unwrap();
            let mut rotated = panel.clone();
            rotated.rotate_left(rotation);
            prop_assert_eq!(trimmed_mean_panel(&rotated).unwrap(), agg.clone());
            for dim in Dimension::ALL {
                let mut vals: Vec<u8> = panel.iter().map(|s| s.get(dim)).collect();
                vals.sort_unstable();
                let v = agg.get(dim);
                prop_assert!(v >= vals[1] as f64 && v <= vals[3] as f64);
            }
        }

        #[test]
        fn trimmed_mean_ignores_inflating_the_single_max(
            panel in proptest::collection::vec(arb_rubric(), 5),
        ) {
            // Replace the CCE maximum with the dimension bound; the aggregate
            // must not move.
            let agg = trimmed_mean_panel(&panel).unwrap();
            let max_idx = (0..5)
                .max_by_key(|&i| panel[i].cce)
                .unwrap();
            let mut inflated = panel.clone();
            inflated[max_idx].cce = 10;
            let agg2 = trimmed_mean_panel(&inflated).unwrap();
            prop_assert_eq!(agg.get(Dimension::Cce), agg2.get(Dimension::Cce));
        }
    }
}
