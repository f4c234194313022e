//! Aggregation of run files into the report table and CSV.
//!
//! One run file is one independent run of one model. Rows report
//! mean ± standard error across runs (mean alone for a single run), sorted
//! by accuracy descending with lexicographic tie order. Accuracy and PHR are
//! shown as percentages; the table and CSV render from the same aggregates,
//! with the CSV carrying full precision.

use std::collections::BTreeMap;

use thiserror::Error;

use diagsim_core::judge::Dimension;
use diagsim_core::metrics::{
    aggregate_runs, session_metrics, MetricsError, RunSummary, SessionMetrics,
};
use diagsim_core::orchestrator::{SessionOutcome, SessionRecord};

use crate::persist::{PanelOutcome, PanelRecord};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("run file contains no records")]
    EmptyRunFile,
    #[error("no run files matched")]
    NoRunFiles,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

// ---------------------------------------------------------------------------
// Per-run summaries
// ---------------------------------------------------------------------------

/// Panel aggregates for one run file.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRunSummary {
    /// Mean DQS over all scored transcripts, timeouts included.
    pub dqs_mean: Option<f64>,
    /// Mean DQS over scored transcripts that ended in a diagnosis.
    pub dqs_diagnosed_mean: Option<f64>,
    pub dim_means: Option<[f64; 7]>,
    pub n_scored: usize,
    pub n_failed: usize,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn summarize_panels(panels: &[PanelRecord]) -> PanelRunSummary {
    let scored: Vec<_> = panels
        .iter()
        .filter_map(|p| match &p.outcome {
            PanelOutcome::Scored { result } => Some(result),
            PanelOutcome::Failed { .. } => None,
        })
        .collect();
    let dqs_values: Vec<f64> = scored.iter().map(|r| r.dqs).collect();
    let diagnosed_values: Vec<f64> = scored
        .iter()
        .filter(|r| !r.timeout_transcript)
        .map(|r| r.dqs)
        .collect();
    let dim_means = (!scored.is_empty()).then(|| {
        let mut out = [0.0; 7];
        for (i, _) in Dimension::ALL.iter().enumerate() {
            let values: Vec<f64> = scored.iter().map(|r| r.aggregated.values[i]).collect();
            out[i] = mean(&values).unwrap();
        }
        out
    });
    PanelRunSummary {
        dqs_mean: mean(&dqs_values),
        dqs_diagnosed_mean: mean(&diagnosed_values),
        dim_means,
        n_scored: scored.len(),
        n_failed: panels.len() - scored.len(),
    }
}

/// One run file reduced to its model label and summaries.
#[derive(Debug, Clone)]
pub struct RunFileSummary {
    pub model: String,
    pub summary: RunSummary,
    pub panel: Option<PanelRunSummary>,
}

/// Summarize the records of one run file (single model per file).
pub fn summarize_records(records: &[SessionRecord]) -> Result<(String, RunSummary), ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyRunFile);
    }
    let model = records
        .iter()
        .find(|r| r.model_id != "unavailable")
        .map(|r| r.model_id.clone())
        .unwrap_or_else(|| records[0].model_id.clone());
    let mut metrics: Vec<SessionMetrics> = Vec::new();
    let mut n_failed = 0usize;
    for record in records {
        match record.outcome {
            SessionOutcome::ProtocolFailure { .. } => n_failed += 1,
            _ => metrics.push(session_metrics(record)?),
        }
    }
    if metrics.is_empty() {
        return Err(ReportError::EmptyRunFile);
    }
    let summary = diagsim_core::metrics::summarize_run(&metrics, n_failed)?;
    Ok((model, summary))
}

// ---------------------------------------------------------------------------
// Cross-run rows
// ---------------------------------------------------------------------------

/// One table cell: a mean, with a standard error when two or more runs back
/// it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub se: Option<f64>,
}

fn cell_from(values: &[f64]) -> Option<Cell> {
    match values.len() {
        0 => None,
        1 => Some(Cell {
            mean: values[0],
            se: None,
        }),
        n => {
            let m = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            Some(Cell {
                mean: m,
                se: Some(var.sqrt() / (n as f64).sqrt()),
            })
        }
    }
}

fn scale(cell: Cell, factor: f64) -> Cell {
    Cell {
        mean: cell.mean * factor,
        se: cell.se.map(|s| s * factor),
    }
}

#[derive(Debug, Clone)]
pub struct ModelRow {
    pub model: String,
    pub n_runs: usize,
    pub n_scored: usize,
    /// Percent.
    pub accuracy: Cell,
    pub turns: Option<Cell>,
    pub positive: Option<Cell>,
    pub negative: Option<Cell>,
    /// Percent; mean of per-case ratios.
    pub phr: Option<Cell>,
    /// 0-100; over scored transcripts, timeouts included.
    pub dqs: Option<Cell>,
    /// 0-100; diagnosed transcripts only.
    pub dqs_diagnosed: Option<Cell>,
    pub dims: Option<[Cell; 7]>,
}

/// Collapse per-run summaries into one row per model.
pub fn build_rows(files: &[RunFileSummary]) -> Result<Vec<ModelRow>, ReportError> {
    if files.is_empty() {
        return Err(ReportError::NoRunFiles);
    }
    let mut by_model: BTreeMap<&str, Vec<&RunFileSummary>> = BTreeMap::new();
    for file in files {
        by_model.entry(&file.model).or_default().push(file);
    }

    let mut rows = Vec::new();
    for (model, runs) in by_model {
        let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
        let collect = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Vec<f64> {
            summaries.iter().filter_map(f).collect()
        };

        // Prefer the shared aggregation path when every metric is defined in
        // >= 2 runs; fall back to per-metric cells otherwise.
        let (accuracy, turns, positive, negative, phr) = match aggregate_runs(&summaries) {
            Ok(agg) => (
                Cell {
                    mean: agg.accuracy.mean,
                    se: Some(agg.accuracy.se),
                },
                Some(Cell {
                    mean: agg.mean_turns.mean,
                    se: Some(agg.mean_turns.se),
                }),
                Some(Cell {
                    mean: agg.mean_positive.mean,
                    se: Some(agg.mean_positive.se),
                }),
                Some(Cell {
                    mean: agg.mean_negative.mean,
                    se: Some(agg.mean_negative.se),
                }),
                Some(Cell {
                    mean: agg.mean_phr.mean,
                    se: Some(agg.mean_phr.se),
                }),
            ),
            Err(_) => (
                cell_from(&collect(&|s| Some(s.accuracy))).expect("accuracy always defined"),
                cell_from(&collect(&|s| s.mean_turns)),
                cell_from(&collect(&|s| s.mean_positive)),
                cell_from(&collect(&|s| s.mean_negative)),
                cell_from(&collect(&|s| s.mean_phr)),
            ),
        };

        let panels: Vec<&PanelRunSummary> = runs.iter().filter_map(|r| r.panel.as_ref()).collect();
        let dqs = cell_from(&panels.iter().filter_map(|p| p.dqs_mean).collect::<Vec<_>>());
        let dqs_diagnosed = cell_from(
            &panels
                .iter()
                .filter_map(|p| p.dqs_diagnosed_mean)
                .collect::<Vec<_>>(),
        );
        let dims = {
            let with_dims: Vec<&[f64; 7]> = panels.iter().filter_map(|p| p.dim_means.as_ref()).collect();
            if with_dims.is_empty() {
                None
            } else {
                let mut cells = [Cell {
                    mean: 0.0,
                    se: None,
                }; 7];
                for i in 0..7 {
                    let values: Vec<f64> = with_dims.iter().map(|d| d[i]).collect();
                    cells[i] = cell_from(&values).unwrap();
                }
                Some(cells)
            }
        };

        rows.push(ModelRow {
            model: model.to_string(),
            n_runs: runs.len(),
            n_scored: panels.iter().map(|p| p.n_scored).sum(),
            accuracy: scale(accuracy, 100.0),
            turns,
            positive,
            negative,
            phr: phr.map(|c| scale(c, 100.0)),
            dqs,
            dqs_diagnosed,
            dims,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

const METRIC_COLUMNS: [&str; 13] = [
    "Acc.", "Tot. Turns", "Pos. Find.", "Neg. Find.", "PHR", "DQS", "CCE", "HC", "ECI", "TJ",
    "DDx", "DC", "DU",
];

fn fmt_cell(cell: Option<Cell>) -> String {
    match cell {
        None => "n/a".into(),
        Some(Cell { mean, se: None }) => format!("{mean:.2}"),
        Some(Cell {
            mean,
            se: Some(se),
        }) => format!("{mean:.2} ± {se:.2}"),
    }
}

fn csv_pair(cell: Option<Cell>) -> String {
    match cell {
        None => ",".into(),
        Some(Cell { mean, se }) => format!(
            "{mean},{}",
            se.map(|s| s.to_string()).unwrap_or_default()
        ),
    }
}

/// Render the human table and the machine CSV from the same rows. Rows sort
/// by accuracy descending; exact accuracy ties order lexicographically.
pub fn emit_report(rows: &[ModelRow]) -> (String, String) {
    let mut sorted: Vec<&ModelRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        b.accuracy
            .mean
            .partial_cmp(&a.accuracy.mean)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.model.cmp(&b.model))
    });

    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Model".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    grid.push(header);
    for row in &sorted {
        let mut cells = vec![row.model.clone()];
        cells.push(fmt_cell(Some(row.accuracy)));
        cells.push(fmt_cell(row.turns));
        cells.push(fmt_cell(row.positive));
        cells.push(fmt_cell(row.negative));
        cells.push(fmt_cell(row.phr));
        cells.push(fmt_cell(row.dqs));
        for i in 0..7 {
            cells.push(fmt_cell(row.dims.map(|d| d[i])));
        }
        grid.push(cells);
    }

    let widths: Vec<usize> = (0..grid[0].len())
        .map(|col| grid.iter().map(|r| r[col].chars().count()).max().unwrap())
        .collect();
    let mut table = String::new();
    for (i, row) in grid.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        table.push_str(line.join("  ").trim_end());
        table.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            table.push_str(&rule.join("  "));
            table.push('\n');
        }
    }
    table.push('\n');
    table.push_str("Acc. and PHR in percent; values are mean ± standard error across runs.\n");
    table.push_str(
        "Efficiency means cover diagnosed sessions only; timeouts and protocol failures count as incorrect for Acc. and are excluded from the means.\n",
    );
    table.push_str("PHR is the mean of per-case ratios, not the ratio of mean findings.\n");
    table.push_str(
        "DQS covers scored transcripts including timeouts; the CSV adds a diagnosed-only DQS column.\n",
    );

    let mut csv = String::from(
        "model,n_runs,n_scored,acc_mean,acc_se,turns_mean,turns_se,pos_mean,pos_se,neg_mean,neg_se,phr_mean,phr_se,dqs_mean,dqs_se,dqs_diagnosed_mean,dqs_diagnosed_se,cce_mean,cce_se,hc_mean,hc_se,eci_mean,eci_se,tj_mean,tj_se,ddx_mean,ddx_se,dc_mean,dc_se,du_mean,du_se\n",
    );
    for row in &sorted {
        let mut fields = vec![
            row.model.clone(),
            row.n_runs.to_string(),
            row.n_scored.to_string(),
        ];
        fields.push(csv_pair(Some(row.accuracy)));
        fields.push(csv_pair(row.turns));
        fields.push(csv_pair(row.positive));
        fields.push(csv_pair(row.negative));
        fields.push(csv_pair(row.phr));
        fields.push(csv_pair(row.dqs));
        fields.push(csv_pair(row.dqs_diagnosed));
        for i in 0..7 {
            fields.push(csv_pair(row.dims.map(|d| d[i])));
        }
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }

    (table, csv)
}
