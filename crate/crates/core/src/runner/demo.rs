//! Synthetic demo inputs for mock runs: a small multiple-choice dataset
//! and matching drafts whose structure the mock annotator reproduces
//! exactly (blank-line steps, one backtrack, stated conclusion).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gateway::EndpointConfig;
use crate::model::{ChoiceLabel, McqItem};
use crate::runner::config::RunConfig;

pub const DEMO_DRAFT_SOURCE: &str = "mock-drafter";

pub fn synthetic_items(count: usize) -> Vec<McqItem> {
    (0..count)
        .map(|i| {
            let names = ["alpha", "beta", "gamma", "delta"];
            let choices: Vec<String> = names
                .iter()
                .map(|name| format!("{name} value {i}"))
                .collect();
            McqItem::new(
                format!("syn-{i:03}"),
                format!("Synthetic question {i}: which option is correct here?"),
                choices,
                ChoiceLabel(i % 4),
            )
            .expect("synthetic item is valid")
        })
        .collect()
}

/// The draft text for an item: five blank-line-separated steps with one
/// backtrack, stating the gold conclusion at the start and the end.
pub fn synthetic_draft_text(item: &McqItem) -> String {
    let gold = item.gold.display();
    format!(
        "I think the answer is {gold}.\n\n\
         Checking the details of each option.\n\n\
         Wait, I should double-check the remaining options.\n\n\
         The other options do not fit.\n\n\
         The final answer should be {gold}."
    )
}

/// Write the demo dataset and draft files under `dir/data`, returning
/// their paths.
pub fn write_demo_inputs(dir: &Path, item_count: usize) -> Result<(PathBuf, PathBuf)> {
    let data_dir = dir.join("data");
    std::fs::create_dir_all(&data_dir)
        .map_err(|e| Error::io(data_dir.display().to_string(), e))?;

    let items = synthetic_items(item_count);
    let dataset_path = data_dir.join("demo-items.jsonl");
    let mut dataset = String::new();
    for item in &items {
        let line = serde_json::json!({
            "id": item.id,
            "question": item.question,
            "choices": item.choices,
            "answer": item.gold.display().to_string(),
        });
        dataset.push_str(&line.to_string());
        dataset.push('\n');
    }
    std::fs::write(&dataset_path, dataset)
        .map_err(|e| Error::io(dataset_path.display().to_string(), e))?;

    let drafts_path = data_dir.join("demo-drafts.jsonl");
    let mut drafts = String::new();
    for item in &items {
        let line = serde_json::json!({
            "question_id": item.id,
            "model": DEMO_DRAFT_SOURCE,
            "draft_text": synthetic_draft_text(item),
        });
        drafts.push_str(&line.to_string());
        drafts.push('\n');
    }
    std::fs::write(&drafts_path, drafts)
        .map_err(|e| Error::io(drafts_path.display().to_string(), e))?;

    Ok((dataset_path, drafts_path))
}

/// A ready-to-run mock configuration under `workdir`.
pub fn demo_config(workdir: &Path, behavior: &str, item_count: usize) -> Result<RunConfig> {
    let (dataset, drafts) = write_demo_inputs(workdir, item_count)?;
    Ok(RunConfig {
        dataset,
        dataset_label: Some("DEMO".into()),
        drafts: Some(drafts),
        output_dir: workdir.join("run"),
        seed: 17,
        scenarios: vec!["all".into()],
        strict_dataset: false,
        wrong_choice_policy: crate::interventions::WrongChoicePolicy::CyclicNext,
        resume: false,
        max_trials: 0,
        target: vec![EndpointConfig::mock("mock-target", behavior)],
        annotator: EndpointConfig::mock("mock-annotator", "echo"),
        judge: EndpointConfig::mock("mock-judge", "echo"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{parse_decomposed_trace, partition_blocks, plan_insertions};
    use crate::gateway::{Gateway, MockBackend, MockBehavior};
    use crate::judge::pattern_extract_conclusion;
    use std::sync::Arc;

    #[test]
    fn synthetic_items_are_valid_and_distinct() {
        let items = synthetic_items(10);
        assert_eq!(items.len(), 10);
        let golds: Vec<usize> = items.iter().map(|i| i.gold.index()).collect();
        assert!(golds.contains(&0) && golds.contains(&3));
    }

    #[test]
    fn draft_conclusion_resolves_by_pattern_pass() {
        let items = synthetic_items(4);
        for item in &items {
            let text = synthetic_draft_text(item);
            assert_eq!(pattern_extract_conclusion(&text, item.n()), Some(item.gold));
        }
    }

    #[tokio::test]
    async fn mock_annotator_decomposition_round_trips() {
        let item = &synthetic_items(1)[0];
        let text = synthetic_draft_text(item);
        let gateway = Gateway::with_backend(
            EndpointConfig::mock("mock-annotator", "echo"),
            Arc::new(MockBackend::new(MockBehavior::EchoConclusion)),
            None,
            None,
        );
        let prompt = crate::decomposition::build_decomposition_prompt(&text).unwrap();
        let annotated = gateway.call_annotator(&prompt).await.unwrap();
        let steps = parse_decomposed_trace(&annotated.text).unwrap();
        assert_eq!(steps.len(), 5);
        let kinds: Vec<crate::model::StepKind> = steps.iter().map(|s| s.kind).collect();
        use crate::model::StepKind::{Backtrack as B, Continue as C};
        assert_eq!(kinds, vec![C, C, B, C, C]);

        let blocks = partition_blocks(&steps).unwrap();
        assert_eq!(blocks.len(), 2);
        let plan = plan_insertions(&blocks).unwrap();
        assert_eq!((plan.initial, plan.middle, plan.end), (2, 2, 5));
    }
}
