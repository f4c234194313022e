//! CLI subcommands: gen-cases, run, judge, report, replay.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::HashSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use diagsim_core::casegen::generate_case;
use diagsim_core::judge::{score_transcript, DimensionWeights, JudgeError};
use diagsim_core::kb::load_knowledge_base;
use diagsim_core::orchestrator::{
    replay_record, run_batch_with, CaseRef, SessionCase, SessionConfig, SessionOutcome,
};

use crate::config::{RosterFactory, RunConfig};
use crate::persist::{
    append_jsonl, load_cases, load_panels, load_records, open_append, panel_path_for, save_cases,
    LoadMode, PanelOutcome, PanelRecord,
};
use crate::report::{build_rows, emit_report, summarize_panels, summarize_records, RunFileSummary};

#[derive(Parser)]
#[command(
    name = "diagsim",
    version,
    about = "Evaluation harness for simulated multi-turn diagnostic dialogues"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a case-set file from the knowledge base
    GenCases {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute diagnostic sessions over a case-set file (resumable)
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Score a run file with the five-judge panel
    Judge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run files (glob patterns accepted) into a table and CSV
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-derive metrics from persisted raw texts and cross-check them
    Replay {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Parse argv and dispatch. Returns the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return err.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenCases { config, seed, out } => gen_cases(&config, seed, &out),
        Command::Run {
            config,
            cases,
            out,
            parallelism,
        } => run(&config, &cases, &out, parallelism),
        Command::Judge { config, run, out } => judge(&config, &run, &out),
        Command::Report { runs, out_dir } => report(&runs, &out_dir),
        Command::Replay { run } => replay(&run),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn gen_cases(config_path: &Path, seed_override: Option<u64>, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let seed = seed_override.unwrap_or(config.seed);
    let (graph, encyclopedia) = load_knowledge_base(&config.kb.graph, &config.kb.encyclopedia)?;
    let generator = config.backends.generator.build_shared()?;
    let mut cases = Vec::with_capacity(config.case_count);
    for i in 0..config.case_count {
        let case_seed = seed.wrapping_add(i as u64);
        let profile = generate_case(&graph, &encyclopedia, generator.as_ref(), case_seed)
            .with_context(|| format!("case {i} (seed {case_seed})"))?;
        cases.push(profile);
    }
    save_cases(out, &cases)?;
    println!("wrote {} cases to {}", cases.len(), out.display());
    Ok(())
}

fn run(
    config_path: &Path,
    cases_path: &Path,
    out: &Path,
    parallelism_override: Option<usize>,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let parallelism = parallelism_override.unwrap_or(config.parallelism).max(1);
    let (graph, _) = load_knowledge_base(&config.kb.graph, &config.kb.encyclopedia)?;
    let (profiles, warnings) = load_cases(cases_path, LoadMode::Lenient)?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    if profiles.is_empty() {
        bail!("case file {} holds no cases", cases_path.display());
    }

    let completed: HashSet<String> = if out.exists() {
        let (existing, warnings) = load_records(out, LoadMode::Lenient)?;
        for warning in &warnings {
            eprintln!("warning: {warning}");
        }
        existing.into_iter().map(|r| r.case_id).collect()
    } else {
        HashSet::new()
    };

    let mut pending = Vec::new();
    for (i, profile) in profiles.into_iter().enumerate() {
        let case_id = format!("case-{i:04}");
        if completed.contains(&case_id) {
            continue;
        }
        let node = graph
            .get(&profile.disease_id)
            .ok_or_else(|| anyhow!("case {case_id}: unknown disease id `{}`", profile.disease_id))?;
        pending.push(SessionCase {
            case_id,
            truth: CaseRef {
                disease_id: node.id.clone(),
                disease_name: node.name.clone(),
                aliases: node.aliases.clone(),
            },
            profile,
        });
    }
    if pending.is_empty() {
        println!("all cases already completed in {}", out.display());
        return Ok(());
    }

    let factory = RosterFactory::new(&config.backends)?;
    let session_config = SessionConfig {
        t_max: config.t_max,
        malformed_reply_retries: 1,
        seed: config.seed,
    };
    let writer = Mutex::new(open_append(out)?);
    let write_error: Mutex<Option<String>> = Mutex::new(None);
    let records = run_batch_with(&pending, &factory, &session_config, parallelism, &|record| {
        let mut file = writer.lock().unwrap();
        if let Err(err) = append_jsonl(&mut file, record) {
            write_error.lock().unwrap().get_or_insert(err.to_string());
        }
    });
    if let Some(err) = write_error.into_inner().unwrap() {
        bail!("failed to persist records: {err}");
    }

    let diagnosed = records
        .iter()
        .filter(|r| matches!(r.outcome, SessionOutcome::Diagnosed { .. }))
        .count();
    let timeouts = records
        .iter()
        .filter(|r| matches!(r.outcome, SessionOutcome::Timeout))
        .count();
    let failures = records.len() - diagnosed - timeouts;
    println!(
        "ran {} sessions ({diagnosed} diagnosed, {timeouts} timeouts, {failures} failures) -> {}",
        records.len(),
        out.display()
    );
    Ok(())
}

fn judge(config_path: &Path, run_path: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    if config.backends.judges.len() != 5 {
        bail!("judging requires exactly 5 judge backends in the config");
    }
    let judges: Vec<_> = config
        .backends
        .judges
        .iter()
        .map(|spec| spec.build_shared())
        .collect::<Result<_, _>>()?;
    let (records, warnings) = load_records(run_path, LoadMode::Lenient)?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }

    let already: HashSet<String> = if out.exists() {
        load_panels(out, LoadMode::Lenient)?
            .0
            .into_iter()
            .map(|p| p.case_id)
            .collect()
    } else {
        HashSet::new()
    };

    let weights = DimensionWeights::default();
    let mut file = open_append(out)?;
    let mut scored = 0usize;
    let mut failed = 0usize;
    for record in &records {
        if already.contains(&record.case_id) {
            continue;
        }
        let outcome = match score_transcript(record, &judges, &weights) {
            Ok(result) => {
                scored += 1;
                PanelOutcome::Scored { result }
            }
            Err(err @ (JudgeError::PanelFailure { .. } | JudgeError::UnscorableSession(_))) => {
                failed += 1;
                PanelOutcome::Failed {
                    reason: err.to_string(),
                }
            }
            Err(err) => return Err(err).context("judge panel aborted"),
        };
        append_jsonl(
            &mut file,
            &PanelRecord {
                case_id: record.case_id.clone(),
                model_id: record.model_id.clone(),
                outcome,
            },
        )?;
    }
    println!(
        "scored {scored} transcripts ({failed} panel failures) -> {}",
        out.display()
    );
    Ok(())
}

fn expand_run_patterns(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pattern in patterns {
        if pattern.contains(['*', '?', '[']) {
            let matched: Vec<PathBuf> = glob::glob(pattern)
                .with_context(|| format!("bad glob pattern `{pattern}`"))?
                .collect::<Result<_, _>>()?;
            if matched.is_empty() {
                bail!("pattern `{pattern}` matched no files");
            }
            paths.extend(matched);
        } else {
            paths.push(PathBuf::from(pattern));
        }
    }
    // Panel files live next to run files and would match broad globs.
    paths.retain(|p| !p.to_string_lossy().ends_with(".panel.jsonl"));
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        bail!("no run files left after filtering panel files");
    }
    Ok(paths)
}

fn report(patterns: &[String], out_dir: &Path) -> Result<()> {
    let paths = expand_run_patterns(patterns)?;
    let mut files = Vec::new();
    for path in &paths {
        let (records, warnings) = load_records(path, LoadMode::Lenient)?;
        for warning in &warnings {
            eprintln!("warning: {warning}");
        }
        let (model, summary) =
            summarize_records(&records).with_context(|| path.display().to_string())?;
        let panel_path = panel_path_for(path);
        let panel = if panel_path.exists() {
            let (panels, warnings) = load_panels(&panel_path, LoadMode::Lenient)?;
            for warning in &warnings {
                eprintln!("warning: {warning}");
            }
            Some(summarize_panels(&panels))
        } else {
            None
        };
        files.push(RunFileSummary {
            model,
            summary,
            panel,
        });
    }
    let rows = build_rows(&files)?;
    let (table, csv) = emit_report(&rows);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join("report.txt"), &table)?;
    std::fs::write(out_dir.join("report.csv"), &csv)?;
    print!("{table}");
    println!(
        "report written to {} (report.txt, report.csv)",
        out_dir.display()
    );
    Ok(())
}

fn replay(run_path: &Path) -> Result<()> {
    let (records, warnings) = load_records(run_path, LoadMode::Lenient)?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    if records.is_empty() {
        bail!("run file {} holds no readable records", run_path.display());
    }
    let mut mismatched = 0usize;
    for record in &records {
        let report = replay_record(record);
        if report.matches() {
            println!("{} ok", report.case_id);
        } else {
            mismatched += 1;
            for mismatch in &report.mismatches {
                println!("{} MISMATCH: {mismatch}", report.case_id);
            }
        }
    }
    println!(
        "replayed {} records: {} matched, {mismatched} mismatched",
        records.len(),
        records.len() - mismatched
    );
    if mismatched > 0 {
        bail!("{mismatched} records failed replay verification");
    }
    if !warnings.is_empty() {
        bail!("{} corrupt lines in run file", warnings.len());
    }
    Ok(())
}
