//! End-to-end pipeline checks over the mock backends: the dry-run
//! subcommand surfaces, audit-trail completeness, config-file loading, and
//! CLI exit codes.

use std::process::Command;

use draft_audit::runner::{self, demo, RunConfig};

#[tokio::test(flavor = "multi_thread")]
async fn decompose_emits_labeled_steps() {
    let workdir = tempfile::tempdir().unwrap();
    let config = demo::demo_config(workdir.path(), "correct-keep", 3).unwrap();
    let path = runner::decompose_only(&config).await.unwrap();
    let body = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = body
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for line in &lines {
        assert!(line.get("error").is_none(), "decomposition errored: {line}");
        let steps = line["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 5);
        assert_eq!(steps[2]["kind"], "backtrack");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn intervene_dry_run_emits_all_texts() {
    let workdir = tempfile::tempdir().unwrap();
    let config = demo::demo_config(workdir.path(), "correct-keep", 2).unwrap();
    let path = runner::intervene_only(&config).await.unwrap();
    let body = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = body
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // Per draft: 12 intra texts plus one direct and one plausible edit.
    assert_eq!(lines.len(), 2 * 14);
    let intra = lines.iter().filter(|l| l.get("scenario").is_some()).count();
    let edits = lines.iter().filter(|l| l.get("edit").is_some()).count();
    assert_eq!((intra, edits), (24, 4));
    for line in &lines {
        assert!(line.get("error").is_none(), "dry run errored: {line}");
        assert!(line["injected_text"].as_str().unwrap().len() > 10);
        if line.get("scenario").is_some() {
            assert!(line["insert_position"].as_u64().unwrap() >= 1);
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn records_reference_only_persisted_request_texts() {
    let workdir = tempfile::tempdir().unwrap();
    let config = demo::demo_config(workdir.path(), "follow-faithful", 3).unwrap();
    let outcome = runner::run(&config).await.unwrap();
    let cache_dir = config.output_dir.join("cache");
    assert_eq!(outcome.report.diagnostics.total_records, 48);
    let mut referenced = 0;
    for record in &outcome.report.records {
        assert!(!record.requests.is_empty(), "record without request refs");
        for key in &record.requests {
            let path = cache_dir.join(format!("{key}.json"));
            assert!(path.exists(), "unpersisted request {key}");
            referenced += 1;
        }
    }
    assert!(referenced > 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn config_file_round_trips_through_toml() {
    let workdir = tempfile::tempdir().unwrap();
    let base = demo::demo_config(workdir.path(), "correct-keep", 2).unwrap();
    let config_path = workdir.path().join("run.toml");
    std::fs::write(&config_path, toml::to_string(&base).unwrap()).unwrap();

    let loaded = RunConfig::load(&config_path).unwrap();
    assert_eq!(loaded.semantic_digest(), base.semantic_digest());
    let outcome = runner::run(&loaded).await.unwrap();
    assert_eq!(outcome.report.diagnostics.total_records, 32);

    // Re-rendering from persisted records reproduces the report exactly.
    let before = std::fs::read_to_string(outcome.report_dir.join("report.md")).unwrap();
    let report_dir = runner::report_only(&loaded).unwrap();
    let after = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert_eq!(before, after);
}

#[tokio::test(flavor = "multi_thread")]
async fn standard_only_dta_leaves_reliance_unscoreable() {
    let workdir = tempfile::tempdir().unwrap();
    let mut config = demo::demo_config(workdir.path(), "echo-conclusion", 3).unwrap();
    config.scenarios = vec!["direct-standard".into(), "shift-continue-initial".into()];
    let outcome = runner::run(&config).await.unwrap();
    let report = &outcome.report;
    assert_eq!(report.diagnostics.total_records, 6, "3 items x 2 scenarios");
    // Without the immediate condition there is nothing to compare against.
    assert!(report.reliance.is_empty());
    assert_eq!(report.diagnostics.unscoreable_reliance, 3);
    // Consistency and the single intra cell still score.
    assert_eq!(report.consistency.len(), 1);
    assert_eq!(report.consistency[0].denominator, 3);
    assert_eq!(report.intra_by_location.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn three_choice_answer_space_runs_end_to_end() {
    let workdir = tempfile::tempdir().unwrap();
    let data_dir = workdir.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    let dataset_path = data_dir.join("tri.jsonl");
    std::fs::write(
        &dataset_path,
        r#"{"id":"tri-0","question":"Trio question: which option is correct here?","choices":["first tri","second tri","third tri"],"answer":"B"}
"#,
    )
    .unwrap();
    let drafts_path = data_dir.join("tri-drafts.jsonl");
    let draft_text = "I think the answer is B.\n\nChecking the details of each option.\n\n\
                      Wait, I should double-check the remaining options.\n\n\
                      The other options do not fit.\n\nThe final answer should be B.";
    std::fs::write(
        &drafts_path,
        format!(
            "{}\n",
            serde_json::json!({
                "question_id": "tri-0",
                "model": "mock-drafter",
                "draft_text": draft_text,
            })
        ),
    )
    .unwrap();

    let mut config = demo::demo_config(workdir.path(), "follow-faithful", 1).unwrap();
    config.dataset = dataset_path;
    config.drafts = Some(drafts_path);
    config.output_dir = workdir.path().join("tri-run");
    let outcome = runner::run(&config).await.unwrap();
    let report = &outcome.report;
    assert_eq!(report.diagnostics.total_records, 16);
    // The cyclic shift and complement generalize to n = 3: a faithful
    // follower still scores 1 everywhere.
    for cell in &report.intra_location_mean {
        assert!((cell.rate_mean - 100.0).abs() < 1e-9, "cell {:?}", cell.key);
    }
    assert_eq!(report.intra_location_mean.len(), 4);
    for record in &report.records {
        assert_eq!(record.n_choices, 3);
    }
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_draft-audit");

    // Clean mock demo exits 0.
    let workdir = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["--output-dir"])
        .arg(workdir.path().join("ok"))
        .args(["mock-demo", "--items", "2"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "clean demo: {status:?}");

    // Flagged trials exit 2.
    let status = Command::new(bin)
        .args(["--output-dir"])
        .arg(workdir.path().join("flagged"))
        .args(["mock-demo", "--behavior", "always-null", "--items", "2"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2), "flagged demo: {status:?}");

    // Fatal config error exits 1 before any work.
    let status = Command::new(bin).arg("run").output().unwrap();
    assert_eq!(status.status.code(), Some(1), "missing config: {status:?}");
}
