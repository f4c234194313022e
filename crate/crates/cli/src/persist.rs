//! JSONL persistence for case sets, run files, and judge panel results.
//!
//! Run files are append-only, one record per line, so interrupted batches
//! resume by skipping case ids already present. Lenient loading reports
//! corrupt lines by number and keeps the remainder; strict loading fails on
//! the first corrupt line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use diagsim_core::judge::JudgePanelResult;
use diagsim_core::orchestrator::SessionRecord;
use diagsim_core::CaseProfile;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {detail}")]
    CorruptLine {
        path: String,
        line: usize,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    Strict,
    Lenient,
}

pub fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PersistError> {
    let file = File::create(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(writer, "{line}").map_err(|source| PersistError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Open a file for line-at-a-time appends.
pub fn open_append(path: &Path) -> Result<File, PersistError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| PersistError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn append_jsonl<T: Serialize>(file: &mut File, item: &T) -> Result<(), PersistError> {
    let line = serde_json::to_string(item).expect("record serializes");
    writeln!(file, "{line}").map_err(|source| PersistError::Io {
        path: "<append>".into(),
        source,
    })
}

/// Load a JSONL file. Lenient mode returns the readable records plus one
/// warning per corrupt line; strict mode errors with the line number.
pub fn load_jsonl<T: DeserializeOwned>(
    path: &Path,
    mode: LoadMode,
) -> Result<(Vec<T>, Vec<String>), PersistError> {
    let file = File::open(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| PersistError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(item) => items.push(item),
            Err(err) => match mode {
                LoadMode::Strict => {
                    return Err(PersistError::CorruptLine {
                        path: path.display().to_string(),
                        line: line_no,
                        detail: err.to_string(),
                    })
                }
                LoadMode::Lenient => {
                    warnings.push(format!("{} line {line_no}: {err}", path.display()))
                }
            },
        }
    }
    Ok((items, warnings))
}

pub fn save_records(path: &Path, records: &[SessionRecord]) -> Result<(), PersistError> {
    save_jsonl(path, records)
}

pub fn load_records(
    path: &Path,
    mode: LoadMode,
) -> Result<(Vec<SessionRecord>, Vec<String>), PersistError> {
    load_jsonl(path, mode)
}

pub fn save_cases(path: &Path, cases: &[CaseProfile]) -> Result<(), PersistError> {
    save_jsonl(path, cases)
}

pub fn load_cases(
    path: &Path,
    mode: LoadMode,
) -> Result<(Vec<CaseProfile>, Vec<String>), PersistError> {
    load_jsonl(path, mode)
}

/// Panel scoring result for one session, or the reason it could not be
/// scored. Failed panels are recorded and excluded from DQS means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub case_id: String,
    pub model_id: String,
    pub outcome: PanelOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PanelOutcome {
    Scored { result: JudgePanelResult },
    Failed { reason: String },
}

pub fn load_panels(
    path: &Path,
    mode: LoadMode,
) -> Result<(Vec<PanelRecord>, Vec<String>), PersistError> {
    load_jsonl(path, mode)
}

/// Conventional panel-file path for a run file: `<run>.panel.jsonl`.
pub fn panel_path_for(run_path: &Path) -> std::path::PathBuf {
    let mut name = run_path.file_name().unwrap_or_default().to_os_string();
    name.push(".panel.jsonl");
    run_path.with_file_name(name)
}
