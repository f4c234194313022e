//! Diagnostic accuracy and efficiency metrics, run-level aggregation, rank
//! and correlation utilities, and majority voting.
//!
//! Conventions: accuracy counts every session in its denominator (timeouts
//! and protocol failures are incorrect); efficiency means average over
//! diagnosed sessions only; the positive hit rate is aggregated as the mean
//! of per-case ratios, not the ratio of means.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::DiseaseNode;
use crate::orchestrator::{SessionOutcome, SessionRecord};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics input is empty")]
    EmptyInput,
    #[error("session `{0}` ended in protocol failure and carries no metrics")]
    FailedSession(String),
    #[error("aggregation requires at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("metric `{0}` is undefined in fewer than 2 runs")]
    UndefinedMetric(&'static str),
    #[error("correlation inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation requires at least 3 points, got {0}")]
    TooShort(usize),
    #[error("correlation input is constant")]
    ConstantInput,
    #[error("unknown metric key `{0}`")]
    UnknownMetric(String),
    #[error("ranking requires at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("majority vote requires an odd label count >= 3, got {0}")]
    BadVoteCount(usize),
    #[error("rankings do not cover the same model set")]
    MismatchedRankings,
}

// ---------------------------------------------------------------------------
// Diagnosis matching
// ---------------------------------------------------------------------------

/// Normalize a disease name: lowercase, drop parenthetical qualifiers, map
/// punctuation to spaces, collapse whitespace.
fn normalize(text: &str) -> String {
    let mut depth = 0usize;
    let mut kept = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ if depth == 0 => kept.push(c),
            _ => {}
        }
    }
    kept.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// True iff the predicted name matches the canonical name or any alias after
/// normalization. Subtype names listed as aliases match.
pub fn diagnosis_matches(predicted: &str, canonical: &str, aliases: &[String]) -> bool {
    let p = normalize(predicted);
    if p.is_empty() {
        return false;
    }
    if p == normalize(canonical) {
        return true;
    }
    aliases.iter().any(|a| p == normalize(a))
}

pub fn diagnosis_correct(predicted: &str, truth: &DiseaseNode) -> bool {
    diagnosis_matches(predicted, &truth.name, &truth.aliases)
}

// ---------------------------------------------------------------------------
// Per-session and per-run metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub correct: bool,
    /// False for timeouts: they count as incorrect and are excluded from the
    /// efficiency means.
    pub diagnosed: bool,
    pub turns: u32,
    pub positive: u32,
    pub negative: u32,
    /// positive / (positive + negative); undefined when no findings at all.
    pub phr: Option<f64>,
}

/// Derive per-session metrics from a completed or timed-out record.
/// Correctness is matched against the record's truth snapshot.
pub fn session_metrics(record: &SessionRecord) -> Result<SessionMetrics, MetricsError> {
    let (correct, diagnosed) = match &record.outcome {
        SessionOutcome::Diagnosed { disease_name, .. } => (
            diagnosis_matches(disease_name, &record.case_ref.disease_name, &record.case_ref.aliases),
            true,
        ),
        SessionOutcome::Timeout => (false, false),
        SessionOutcome::ProtocolFailure { .. } => {
            return Err(MetricsError::FailedSession(record.case_id.clone()))
        }
    };
    let total = record.positive_findings + record.negative_findings;
    let phr = (total > 0).then(|| record.positive_findings as f64 / total as f64);
    Ok(SessionMetrics {
        correct,
        diagnosed,
        turns: record.doctor_turns,
        positive: record.positive_findings,
        negative: record.negative_findings,
        phr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// correct / all sessions, protocol failures included as incorrect.
    pub accuracy: f64,
    pub mean_turns: Option<f64>,
    pub mean_positive: Option<f64>,
    pub mean_negative: Option<f64>,
    pub mean_phr: Option<f64>,
    pub n_cases: usize,
    /// Sessions excluded from the efficiency means (timeouts + failures).
    pub n_excluded: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Collapse one run's session metrics. `n_failed` counts protocol-failure
/// sessions, which enter the accuracy denominator but no mean.
pub fn summarize_run(metrics: &[SessionMetrics], n_failed: usize) -> Result<RunSummary, MetricsError> {
    if metrics.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n_cases = metrics.len() + n_failed;
    let correct = metrics.iter().filter(|m| m.correct).count();
    let included: Vec<&SessionMetrics> = metrics.iter().filter(|m| m.diagnosed).collect();
    let turns: Vec<f64> = included.iter().map(|m| m.turns as f64).collect();
    let positives: Vec<f64> = included.iter().map(|m| m.positive as f64).collect();
    let negatives: Vec<f64> = included.iter().map(|m| m.negative as f64).collect();
    let phrs: Vec<f64> = included.iter().filter_map(|m| m.phr).collect();
    Ok(RunSummary {
        accuracy: correct as f64 / n_cases as f64,
        mean_turns: mean(&turns),
        mean_positive: mean(&positives),
        mean_negative: mean(&negatives),
        mean_phr: mean(&phrs),
        n_cases,
        n_excluded: n_cases - included.len(),
    })
}

// ---------------------------------------------------------------------------
// Cross-run aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    /// Standard error of the mean: sample stddev / sqrt(n).
    pub se: f64,
}

fn mean_se(xs: &[f64]) -> MetricAggregate {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    MetricAggregate {
        mean: m,
        se: var.sqrt() / n.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub accuracy: MetricAggregate,
    pub mean_turns: MetricAggregate,
    pub mean_positive: MetricAggregate,
    pub mean_negative: MetricAggregate,
    pub mean_phr: MetricAggregate,
    pub n_runs: usize,
}

/// Mean and standard error per metric over independent runs.
pub fn aggregate_runs(summaries: &[RunSummary]) -> Result<AggregateSummary, MetricsError> {
    if summaries.len() < 2 {
        return Err(MetricsError::TooFewRuns(summaries.len()));
    }
    let pick = |f: fn(&RunSummary) -> Option<f64>, name: &'static str| {
        let values: Vec<f64> = summaries.iter().filter_map(f).collect();
        if values.len() < 2 {
            Err(MetricsError::UndefinedMetric(name))
        } else {
            Ok(mean_se(&values))
        }
    };
    Ok(AggregateSummary {
        accuracy: mean_se(&summaries.iter().map(|s| s.accuracy).collect::<Vec<_>>()),
        mean_turns: pick(|s| s.mean_turns, "mean_turns")?,
        mean_positive: pick(|s| s.mean_positive, "mean_positive")?,
        mean_negative: pick(|s| s.mean_negative, "mean_negative")?,
        mean_phr: pick(|s| s.mean_phr, "mean_phr")?,
        n_runs: summaries.len(),
    })
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Average ranks (1-based); ties receive the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for k in i..j {
            ranks[order[k]] = avg;
        }
        i = j;
    }
    ranks
}

/// Product-moment Pearson r and Spearman rho (Pearson on average ranks).
pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(MetricsError::TooShort(xs.len()));
    }
    let r = pearson(xs, ys)?;
    let rho = pearson(&average_ranks(xs), &average_ranks(ys))?;
    Ok((r, rho))
}

// ---------------------------------------------------------------------------
// Rankings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub model: String,
    pub value: f64,
    /// 1-based position after tie-breaking.
    pub rank: usize,
    pub tied: bool,
}

fn metric_of(summary: &AggregateSummary, key: &str) -> Option<f64> {
    match key {
        "accuracy" => Some(summary.accuracy.mean),
        "mean_turns" => Some(summary.mean_turns.mean),
        "mean_positive" => Some(summary.mean_positive.mean),
        "mean_negative" => Some(summary.mean_negative.mean),
        "mean_phr" => Some(summary.mean_phr.mean),
        _ => None,
    }
}

/// Rank models descending by one metric; exact ties break lexicographically
/// by model name and are flagged.
pub fn rank_models(
    summaries: &BTreeMap<String, AggregateSummary>,
    key: &str,
) -> Result<Vec<RankedModel>, MetricsError> {
    if summaries.len() < 2 {
        return Err(MetricsError::TooFewModels(summaries.len()));
    }
    let mut rows: Vec<(String, f64)> = Vec::with_capacity(summaries.len());
    for (model, summary) in summaries {
        let value =
            metric_of(summary, key).ok_or_else(|| MetricsError::UnknownMetric(key.to_string()))?;
        rows.push((model.clone(), value));
    }
    rows.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, (model, value))| RankedModel {
            model: model.clone(),
            value: *value,
            rank: i + 1,
            tied: rows.iter().any(|(m, v)| m != model && v == value),
        })
        .collect())
}

/// Pairwise Spearman agreement between rankings of the same model set.
/// Each ranking is an ordered best-to-worst model list; returns
/// (index a, index b, rho) for every pair.
pub fn rank_agreement(rankings: &[Vec<String>]) -> Result<Vec<(usize, usize, f64)>, MetricsError> {
    if rankings.len() < 2 {
        return Err(MetricsError::MismatchedRankings);
    }
    let universe: BTreeSet<&String> = rankings[0].iter().collect();
    for ranking in rankings {
        let set: BTreeSet<&String> = ranking.iter().collect();
        if set != universe || ranking.len() != rankings[0].len() {
            return Err(MetricsError::MismatchedRankings);
        }
    }
    let rank_vector = |ranking: &[String]| -> Vec<f64> {
        universe
            .iter()
            .map(|m| (ranking.iter().position(|r| &r == m).unwrap() + 1) as f64)
            .collect()
    };
    let vectors: Vec<Vec<f64>> = rankings.iter().map(|r| rank_vector(r)).collect();
    let mut out = Vec::new();
    for a in 0..vectors.len() {
        for b in a + 1..vectors.len() {
            let (_, rho) = correlations(&vectors[a], &vectors[b])?;
            out.push((a, b, rho));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Majority voting
// ---------------------------------------------------------------------------

/// Modal label over an odd number (>= 3) of binary votes.
pub fn majority_vote(labels: &[bool]) -> Result<bool, MetricsError> {
    if labels.len() < 3 || labels.len() % 2 == 0 {
        return Err(MetricsError::BadVoteCount(labels.len()));
    }
    let yes = labels.iter().filter(|&&l| l).count();
    Ok(yes * 2 > labels.len())
}
