//! CLI behavior around persisted run files: golden replay through the
//! binary surface, crash-resume semantics, and report shape over many runs.

use std::path::PathBuf;

use diagsim_core::fixture::ScriptedSessionFixture;
use diagsim_cli::persist::{load_records, save_records, LoadMode};
use diagsim_cli::run_command;

fn repo_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn golden_records() -> Vec<diagsim_core::SessionRecord> {
    ScriptedSessionFixture::load_dir(&repo_fixtures().join("golden"))
        .unwrap()
        .iter()
        .map(|f| f.run())
        .collect()
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["diagsim".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_command(argv)
}

#[test]
fn replay_passes_on_the_shipped_golden_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let run_path = dir.path().join("golden.jsonl");
    save_records(&run_path, &golden_records()).unwrap();
    assert_eq!(cli(&["replay", "--run", run_path.to_str().unwrap()]), 0);
}

#[test]
fn replay_fails_on_tampered_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run_path = dir.path().join("tampered.jsonl");
    let mut records = golden_records();
    records[0].positive_findings += 1;
    save_records(&run_path, &records).unwrap();
    assert_eq!(cli(&["replay", "--run", run_path.to_str().unwrap()]), 1);
}

#[test]
fn report_over_five_run_files_emits_mean_and_se() {
    let dir = tempfile::tempdir().unwrap();
    // One run file per (model, run): each golden fixture stands in for one
    // model's run.
    for record in golden_records() {
        for run in 0..5 {
            let path = dir.path().join(format!("{}.run{run}.jsonl", record.model_id));
            save_records(&path, std::slice::from_ref(&record)).unwrap();
        }
    }
    let pattern = dir.path().join("*.run*.jsonl");
    let out_dir = dir.path().join("report");
    assert_eq!(
        cli(&[
            "report",
            "--runs",
            pattern.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap()
        ]),
        0
    );
    let table = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(table.contains('±'), "5 runs must yield mean ± SE cells:\n{table}");
    // Four golden fixtures carry four distinct doctor labels, so four rows.
    for model in ["gpt-4.1-mini", "gemini-2.5-pro", "llama-4-scout", "qwen3-8b"] {
        assert!(table.contains(model), "missing row for {model}");
    }
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header + one row per model");
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    assert_eq!(cli(&["replay", "--run", "/nonexistent/run.jsonl"]), 1);
}

#[test]
fn case_profile_records_use_the_fixed_field_names() {
    let fixtures = ScriptedSessionFixture::load_dir(&repo_fixtures().join("golden")).unwrap();
    let json = serde_json::to_value(&fixtures[0].case.profile).unwrap();
    let object = json.as_object().unwrap();
    for key in [
        "disease_id",
        "disease_text",
        "demographics",
        "symptoms",
        "raw_document",
    ] {
        assert!(object.contains_key(key), "case profile missing `{key}`");
    }
}

#[test]
fn interrupted_runs_resume_without_redoing_cases() {
    // Build a tiny scripted config over the sample KB, run it, truncate the
    // output to simulate a crash, and re-run: only the missing cases execute.
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    std::fs::create_dir_all(base.join("kb")).unwrap();
    for file in ["graph.json", "encyclopedia.json"] {
        std::fs::copy(repo_fixtures().join("kb").join(file), base.join("kb").join(file)).unwrap();
    }
    let (graph, _) = diagsim_core::kb::load_knowledge_base(
        &base.join("kb/graph.json"),
        &base.join("kb/encyclopedia.json"),
    )
    .unwrap();

    let seed = 3u64;
    let case_count = 3usize;
    let generator_replies: Vec<String> = (0..case_count)
        .map(|i| {
            let node = diagsim_core::kb::sample_disease(&graph, seed + i as u64).unwrap();
            let symptoms: String = node
                .symptoms
                .iter()
                .map(|s| {
                    format!(
                        "- Category: Primary\n  - Specific Manifestation: {}\n  - Dynamic Trend: remaining stable\n",
                        s.name
                    )
                })
                .collect();
            format!(
                "1. Basic Information\n- Age: 33 years\n- Gender: Female\n- Occupation: Clerk\n\n2. Past Medical History & Personal History\n- None.\n\n3. Chief Complaint and History of Present Illness\n- Chief Complaint: \"I feel off.\"\n\n4. Symptom List (Structured Presentation)\n{symptoms}\n5. Physical Examination Summary (Described by Systems)\n- Inspection: As above.\n\n6. Auxiliary Examination Results (Simulating Real Reports)\n- Laboratory Tests: Pending.\n"
            )
        })
        .collect();

    let config = serde_json::json!({
        "kb": {"graph": "kb/graph.json", "encyclopedia": "kb/encyclopedia.json"},
        "case_count": case_count,
        "run_count": 1,
        "seed": seed,
        "backends": {
            "doctor": {"kind": "scripted", "model_id": "resume-doctor",
                       "replies": ["Thought: enough.\nAction: [!Diagnosis!](Influenza)"]},
            "patient": {"kind": "scripted", "replies": ["I feel terrible."]},
            "examiner": {"kind": "scripted", "replies": ["[!Negative!](normal)"]},
            "generator": {"kind": "scripted", "replies": generator_replies}
        }
    });
    let config_path = base.join("config.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();

    let cases_path = base.join("cases.jsonl");
    assert_eq!(
        cli(&[
            "gen-cases",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            cases_path.to_str().unwrap()
        ]),
        0
    );

    let run_path = base.join("run.jsonl");
    assert_eq!(
        cli(&[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--cases",
            cases_path.to_str().unwrap(),
            "--out",
            run_path.to_str().unwrap()
        ]),
        0
    );
    let (full, _) = load_records(&run_path, LoadMode::Strict).unwrap();
    assert_eq!(full.len(), 3);

    // Simulate a crash after the first record, then resume.
    save_records(&run_path, &full[..1]).unwrap();
    assert_eq!(
        cli(&[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--cases",
            cases_path.to_str().unwrap(),
            "--out",
            run_path.to_str().unwrap()
        ]),
        0
    );
    let (resumed, _) = load_records(&run_path, LoadMode::Strict).unwrap();
    assert_eq!(resumed.len(), 3, "resume completes the missing cases once");
    let mut ids: Vec<&str> = resumed.iter().map(|r| r.case_id.as_str()).collect();
    ids.sort();
    assert_eq!(ids, vec!["case-0000", "case-0001", "case-0002"]);

    // A third invocation is a no-op.
    assert_eq!(
        cli(&[
            "run",
            "--config",
            config_path.to_str().unwrap(),
            "--cases",
            cases_path.to_str().unwrap(),
            "--out",
            run_path.to_str().unwrap()
        ]),
        0
    );
    let (unchanged, _) = load_records(&run_path, LoadMode::Strict).unwrap();
    assert_eq!(unchanged.len(), 3);
}
