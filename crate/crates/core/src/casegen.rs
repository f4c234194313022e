//! Knowledge-grounded case generation.
//!
//! Maps (graph, encyclopedia, generator backend) to a validated case profile:
//! render the generation prompt for a sampled disease, invoke the generator,
//! parse the six-section case document, and check consistency constraints
//! against the graph. Generation fails closed after a bounded number of
//! attempts when validation keeps failing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatBackend, ChatRequest, GatewayError};
use crate::kb::{sample_disease, symptom_neighbors, DiseaseNode, Encyclopedia, KbError, KnowledgeGraph};
use crate::template::{fill_template, TemplateError};

/// Regeneration cap when a generated document fails parsing or validation.
pub const MAX_GENERATION_ATTEMPTS: u32 = 3;

/// Minimum fraction of case symptoms that must fuzzily match the disease's
/// graph neighbors.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CaseGenError {
    #[error("disease passage is empty")]
    EmptyPassage,
    #[error("no encyclopedia passage for disease `{0}`")]
    MissingPassage(String),
    #[error("case document is missing section `{0}`")]
    MissingSection(&'static str),
    #[error("case document contains a prohibited `{0}` section")]
    ForbiddenSection(String),
    #[error("unparseable symptom entry: {0}")]
    UnparseableSymptom(String),
    #[error("symptom list contains no entries")]
    NoSymptoms,
    #[error("could not extract {0} from the Basic Information section")]
    MissingDemographic(&'static str),
    #[error("case generation failed validation after {attempts} attempts: {detail}")]
    ValidationFailed { attempts: u32, detail: String },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("generator backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicProfile {
    pub age: u32,
    pub gender: String,
    pub occupation: String,
    pub history_notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Worsening,
    Improving,
    Stable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomManifestation {
    pub category: String,
    pub manifestation: String,
    pub trend: Trend,
}

/// The latent ground truth for one session: sampled disease, its passage,
/// and the generated patient presentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseProfile {
    pub disease_id: String,
    pub disease_text: String,
    pub demographics: DemographicProfile,
    pub symptoms: Vec<SymptomManifestation>,
    pub raw_document: String,
}

impl CaseProfile {
    /// The description injected into patient/examiner prompts: encyclopedia
    /// passage plus the full generated case document.
    pub fn disease_description(&self) -> String {
        format!("{}\n\n{}", self.disease_text, self.raw_document)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
    pub overlap_ratio: f64,
}

impl ValidationReport {
    fn new(violations: Vec<Violation>, overlap_ratio: f64) -> Self {
        Self {
            passed: violations.is_empty(),
            violations,
            overlap_ratio,
        }
    }
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

/// The six required sections, full names as they appear in the generation
/// prompt. Detection also accepts the base name without the parenthetical.
pub const SECTIONS: [&str; 6] = [
    "Basic Information",
    "Past Medical History & Personal History",
    "Chief Complaint and History of Present Illness",
    "Symptom List (Structured Presentation)",
    "Physical Examination Summary (Described by Systems)",
    "Auxiliary Examination Results (Simulating Real Reports)",
];

fn base_name(section: &str) -> &str {
    section.split(" (").next().unwrap_or(section)
}

/// Strip markdown/bold/numbering decoration from a potential header line.
/// Returns the cleaned text and whether decoration was present.
fn strip_header_decoration(line: &str) -> (String, bool) {
    let trimmed = line.trim();
    let mut decorated = false;
    let mut s = trimmed;
    while s.starts_with('#') {
        s = s[1..].trim_start();
        decorated = true;
    }
    let mut owned = s.to_string();
    if owned.contains("**") {
        owned = owned.replace("**", "");
        decorated = true;
    }
    let mut s = owned.trim().to_string();
    // Leading "3." / "3)" numbering.
    let digits: String = s.chars().take_while(|c| c.is_ascii_digit()).collect();
    if !digits.is_empty() {
        let rest = &s[digits.len()..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            s = r.trim_start().to_string();
            decorated = true;
        }
    }
    if let Some(r) = s.strip_suffix(':') {
        s = r.trim_end().to_string();
        decorated = true;
    }
    (s, decorated)
}

/// Which canonical section (if any) a line is a header for.
fn match_section(line: &str) -> Option<&'static str> {
    let (cleaned, _) = strip_header_decoration(line);
    SECTIONS
        .iter()
        .find(|&&sec| cleaned == sec || cleaned == base_name(sec))
        .copied()
}

/// Header lines announcing diagnostic conclusions or treatment plans are
/// prohibited in case documents; the profile must not leak the answer.
fn forbidden_header(line: &str) -> Option<String> {
    let trimmed = line.trim();
    let (cleaned, decorated) = strip_header_decoration(trimmed);
    if !(decorated || trimmed.contains(':')) {
        return None;
    }
    let head = cleaned.split(':').next().unwrap_or(&cleaned).trim();
    let lowered = head.to_lowercase();
    if (lowered.starts_with("diagnosis")
        || lowered.starts_with("diagnostic conclusion")
        || lowered.starts_with("treatment"))
        && head.split_whitespace().count() <= 4
    {
        Some(head.to_string())
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

pub const CASE_GENERATION_PROMPT: &str = r#"Please generate a structurally rigorous, clinically authentic, and medically educationally compliant "Standardized Patient Case" based on the following disease description. The case must only contain the following six specified sections. It is strictly prohibited to include diagnostic conclusions or treatment recommendations.

1. Basic Information
   - Age and Gender: Set reasonably based on the epidemiological characteristics of the disease (e.g., common age of onset, gender predisposition, genetic pattern).
   - Occupation/Status, Marital Status, Place of Residence: Be concise (1-2 sentences).
   - Family Genetic History (if applicable): Specify kinship (e.g., "father," "aunt"), specific disease manifestations, and age of onset.

2. Past Medical History & Personal History
   - Past major illnesses, surgeries, trauma, infection history (briefly described in chronological order).
   - Allergy history (drug/food/environmental), vaccination history (key vaccines only).
   - Personal living habits: Smoking/alcohol (amount and duration), exercise capacity, diet routine, etc.
   - History of growth and development or psychosocial history (if disease-related, briefly describe key events or states).

3. Chief Complaint and History of Present Illness
   - Chief Complaint: Describe in the patient's first-person tone, not exceeding 20 words, focusing on the most significant discomfort (e.g., "I have had chest tightness and pain for two weeks").
   - History of Present Illness: Narrate along the timeline — time of onset, possible triggers, symptom evolution process (including key time points), aggravating/alleviating factors, and current functional status. Must reflect the natural course of the disease.

4. Symptom List (Structured Presentation)
   - Each symptom must include the following three elements:
     - Category (e.g., local signs, pain characteristics, functional impairment, systemic symptoms, etc.)
     - Specific Manifestation (including details such as location, nature, intensity, frequency, duration, etc.)
     - Dynamic Trend (progressively worsening / gradually alleviating / remaining stable)

5. Physical Examination Summary (Described by Systems)
   - List only key positive signs and negative signs of differential significance. Briefly describe according to the following four categories:
     - Inspection: Appearance abnormalities, skin changes, masses, deformities, etc.
     - Palpation: Tenderness, texture, boundaries, mobility, temperature, etc.
     - Motion Examination: Range of motion of joints, muscle strength grading, reflex status, coordination, etc.
     - Measurement: Lesion size, quantity, precise anatomical location (if applicable).

6. Auxiliary Examination Results (Simulating Real Reports)
   - List completed key examinations and their objective, quantitative results. Ensure they align with the typical manifestations of the disease:
     - Imaging: X-ray/MRI/CT/Ultrasound, etc. (include key descriptions)
     - Laboratory Tests: Complete blood count, biochemical indicators, inflammation markers, tumor markers, etc. (provide qualitatively, no specific numerical values needed)
     - Pathological/Genetic Testing (if performed): Histological description or name of gene mutation
     - Other Specialized Examinations: e.g., nerve conduction velocity, pulmonary function tests, electrocardiogram, etc. (include key parameters)

All content must be clinically authentic, with specific data, and logically self-consistent. Fabrication of diagnoses or treatments is prohibited.

Disease description: {disease_description}"#;

/// Render the case-generation prompt for one disease and its passage.
pub fn render_case_prompt(disease: &DiseaseNode, passage: &str) -> Result<String, CaseGenError> {
    if passage.trim().is_empty() {
        return Err(CaseGenError::EmptyPassage);
    }
    let description = format!("{} — {passage}", disease.name);
    Ok(fill_template(
        CASE_GENERATION_PROMPT,
        &[("disease_description", &description)],
        &["disease_description"],
    )?)
}

// ---------------------------------------------------------------------------
// Document parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCase {
    pub demographics: DemographicProfile,
    pub symptoms: Vec<SymptomManifestation>,
}

fn split_sections(text: &str) -> Result<Vec<(&'static str, String)>, CaseGenError> {
    let mut sections: Vec<(&'static str, Vec<&str>)> = Vec::new();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        if let Some(name) = forbidden_header(line) {
            return Err(CaseGenError::ForbiddenSection(name));
        }
        if let Some(section) = match_section(line) {
            sections.push((section, Vec::new()));
            current = Some(sections.len() - 1);
            continue;
        }
        if let Some(idx) = current {
            sections[idx].1.push(line);
        }
    }
    Ok(sections
        .into_iter()
        .map(|(name, lines)| (name, lines.join("\n").trim().to_string()))
        .collect())
}

fn key_value(line: &str, keys: &[&str]) -> Option<String> {
    let stripped = line
        .trim()
        .trim_start_matches(['-', '*', '•'])
        .trim_start();
    let (k, v) = stripped.split_once(':')?;
    let k = k.trim().to_lowercase();
    keys.iter()
        .any(|key| k == key.to_lowercase())
        .then(|| v.trim().to_string())
}

fn first_integer(text: &str) -> Option<u32> {
    let mut digits = String::new();
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            break;
        }
    }
    digits.parse().ok()
}

fn parse_demographics(basic: &str, history: &str) -> Result<DemographicProfile, CaseGenError> {
    let mut age = None;
    let mut gender: Option<String> = None;
    let mut occupation = String::new();
    for line in basic.lines() {
        let lowered = line.to_lowercase();
        if age.is_none() && (lowered.contains("age") || lowered.contains("year-old")) {
            age = first_integer(line);
        }
        if let Some(v) = key_value(line, &["gender", "sex", "age and gender"]) {
            let lowered = v.to_lowercase();
            if lowered.contains("female") || lowered.contains("woman") {
                gender = Some("Female".into());
            } else if lowered.contains("male") || lowered.contains("man") {
                gender = Some("Male".into());
            } else if !v.is_empty() {
                gender = Some(v);
            }
        }
        if let Some(v) = key_value(line, &["occupation", "occupation/status"]) {
            occupation = v;
        }
    }
    if gender.is_none() {
        let lowered = basic.to_lowercase();
        if lowered.contains("female") || lowered.contains("woman") {
            gender = Some("Female".into());
        } else if lowered.contains("male") || lowered.contains(" man") {
            gender = Some("Male".into());
        }
    }
    let age = age.ok_or(CaseGenError::MissingDemographic("age"))?;
    let gender = gender.ok_or(CaseGenError::MissingDemographic("gender"))?;
    Ok(DemographicProfile {
        age,
        gender,
        occupation,
        history_notes: history.trim().to_string(),
    })
}

fn parse_trend(value: &str) -> Option<Trend> {
    let v = value.to_lowercase();
    if v.contains("worsen") {
        Some(Trend::Worsening)
    } else if v.contains("improv") || v.contains("alleviat") {
        Some(Trend::Improving)
    } else if v.contains("stable") || v.contains("remain") {
        Some(Trend::Stable)
    } else {
        None
    }
}

fn parse_symptom_list(body: &str) -> Result<Vec<SymptomManifestation>, CaseGenError> {
    struct Partial {
        category: String,
        manifestation: Option<String>,
        trend: Option<Trend>,
    }
    let mut out = Vec::new();
    let mut current: Option<Partial> = None;

    let finish = |p: Partial, out: &mut Vec<SymptomManifestation>| -> Result<(), CaseGenError> {
        let manifestation = p.manifestation.filter(|m| !m.is_empty()).ok_or_else(|| {
            CaseGenError::UnparseableSymptom(format!(
                "entry `{}` lacks a specific manifestation",
                p.category
            ))
        })?;
        let trend = p.trend.ok_or_else(|| {
            CaseGenError::UnparseableSymptom(format!(
                "entry `{}` lacks a recognizable dynamic trend",
                p.category
            ))
        })?;
        out.push(SymptomManifestation {
            category: p.category,
            manifestation,
            trend,
        });
        Ok(())
    };

    for line in body.lines() {
        if let Some(v) = key_value(line, &["category"]) {
            if let Some(prev) = current.take() {
                finish(prev, &mut out)?;
            }
            current = Some(Partial {
                category: v,
                manifestation: None,
                trend: None,
            });
        } else if let Some(v) = key_value(line, &["specific manifestation", "manifestation"]) {
            if let Some(p) = current.as_mut() {
                p.manifestation = Some(v);
            }
        } else if let Some(v) = key_value(line, &["dynamic trend", "trend"]) {
            if let Some(p) = current.as_mut() {
                p.trend = parse_trend(&v);
                if p.trend.is_none() {
                    return Err(CaseGenError::UnparseableSymptom(format!(
                        "unrecognized trend value `{v}`"
                    )));
                }
            }
        }
    }
    if let Some(prev) = current.take() {
        finish(prev, &mut out)?;
    }
    if out.is_empty() {
        return Err(CaseGenError::NoSymptoms);
    }
    Ok(out)
}

/// Extract demographics and the structured symptom list from a six-section
/// case document. Sections are keyed by header, so their order does not
/// matter; all six must be present and a diagnosis/treatment section is an
/// error.
pub fn parse_case_document(text: &str) -> Result<ParsedCase, CaseGenError> {
    let sections = split_sections(text)?;
    let body = |name: &'static str| -> Result<&str, CaseGenError> {
        sections
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, b)| b.as_str())
            .ok_or(CaseGenError::MissingSection(name))
    };
    for section in SECTIONS {
        body(section)?;
    }
    let demographics = parse_demographics(body(SECTIONS[0])?, body(SECTIONS[1])?)?;
    let symptoms = parse_symptom_list(body(SECTIONS[3])?)?;
    Ok(ParsedCase {
        demographics,
        symptoms,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Case-insensitive token containment in either direction.
fn fuzzy_match(case_text: &str, kg_name: &str) -> bool {
    let c = tokens(case_text);
    let k = tokens(kg_name);
    if c.is_empty() || k.is_empty() {
        return false;
    }
    k.is_subset(&c) || c.is_subset(&k)
}

/// Fraction of case symptoms that fuzzily match the disease's graph
/// neighbors.
pub fn symptom_overlap_ratio(profile: &CaseProfile, neighbors: &BTreeSet<String>) -> f64 {
    if profile.symptoms.is_empty() {
        return 0.0;
    }
    let matched = profile
        .symptoms
        .iter()
        .filter(|s| {
            let text = format!("{} {}", s.category, s.manifestation);
            neighbors.iter().any(|n| fuzzy_match(&text, n))
        })
        .count();
    matched as f64 / profile.symptoms.len() as f64
}

/// Check a parsed profile against the structural consistency constraints.
/// Pure: identical inputs yield identical reports.
pub fn validate_case(profile: &CaseProfile, graph: &KnowledgeGraph) -> ValidationReport {
    validate_case_with(profile, graph, DEFAULT_OVERLAP_THRESHOLD)
}

pub fn validate_case_with(
    profile: &CaseProfile,
    graph: &KnowledgeGraph,
    overlap_threshold: f64,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |code: &str, message: String| {
        violations.push(Violation {
            code: code.into(),
            message,
        });
    };

    let mut seen = BTreeSet::new();
    for line in profile.raw_document.lines() {
        if let Some(name) = forbidden_header(line) {
            push("forbidden_section", format!("prohibited `{name}` section"));
        }
        if let Some(section) = match_section(line) {
            seen.insert(section);
        }
    }
    for section in SECTIONS {
        if !seen.contains(section) {
            push("missing_section", format!("section `{section}` not found"));
        }
    }

    if profile.symptoms.is_empty() {
        push("no_symptoms", "symptom list is empty".into());
    }
    if profile.demographics.age > 120 {
        push(
            "age_out_of_range",
            format!("age {} outside 0-120", profile.demographics.age),
        );
    }
    if profile.demographics.gender.trim().is_empty() {
        push("missing_gender", "gender is empty".into());
    }

    let overlap_ratio = match symptom_neighbors(graph, &profile.disease_id) {
        Ok(neighbors) => {
            let ratio = symptom_overlap_ratio(profile, &neighbors);
            if !profile.symptoms.is_empty() && ratio < overlap_threshold {
                push(
                    "low_symptom_overlap",
                    format!("overlap {ratio:.2} below threshold {overlap_threshold:.2}"),
                );
            }
            ratio
        }
        Err(_) => {
            push(
                "unknown_disease",
                format!("disease id `{}` not in graph", profile.disease_id),
            );
            0.0
        }
    };

    ValidationReport::new(violations, overlap_ratio)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Sample a disease, invoke the generator, and return a parsed profile whose
/// validation passed. Retries generation up to [`MAX_GENERATION_ATTEMPTS`]
/// times on parse or validation failure, then fails closed.
pub fn generate_case(
    graph: &KnowledgeGraph,
    encyclopedia: &Encyclopedia,
    generator: &dyn ChatBackend,
    seed: u64,
) -> Result<CaseProfile, CaseGenError> {
    let disease = sample_disease(graph, seed)?;
    let passage = encyclopedia
        .passage(&disease.id)
        .ok_or_else(|| CaseGenError::MissingPassage(disease.id.clone()))?;
    let prompt = render_case_prompt(disease, passage)?;
    let request = ChatRequest::user_prompt(generator.model_id(), &prompt);

    let mut last_failure = String::from("no attempt made");
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let document = generator.complete(&request)?;
        match parse_case_document(&document) {
            Err(err) => last_failure = err.to_string(),
            Ok(parsed) => {
                let profile = CaseProfile {
                    disease_id: disease.id.clone(),
                    disease_text: passage.to_string(),
                    demographics: parsed.demographics,
                    symptoms: parsed.symptoms,
                    raw_document: document,
                };
                let report = validate_case(&profile, graph);
                if report.passed {
                    return Ok(profile);
                }
                last_failure = report
                    .violations
                    .iter()
                    .map(|v| v.code.as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
            }
        }
    }
    Err(CaseGenError::ValidationFailed {
        attempts: MAX_GENERATION_ATTEMPTS,
        detail: last_failure,
    })
}
