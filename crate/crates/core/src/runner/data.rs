//! Dataset and draft ingestion: line-delimited JSON with schema
//! validation that names the offending line.

use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{ChoiceLabel, McqItem, ThinkingDraft};

#[derive(Debug, Deserialize)]
struct DatasetLine {
    id: String,
    question: String,
    choices: Vec<String>,
    answer: String,
}

#[derive(Debug, Deserialize)]
struct DraftLine {
    question_id: String,
    model: String,
    draft_text: String,
}

/// Load a dataset file. Items whose choice count differs from the paper's
/// 4 are accepted with a warning (the templates generalize), or rejected
/// in strict mode. Duplicate ids are always rejected.
pub fn load_mcq_dataset(path: &Path, strict: bool) -> Result<(Vec<McqItem>, Vec<String>)> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(line)
            .map_err(|e| Error::load(path.display().to_string(), lineno, e.to_string()))?;
        if !seen.insert(parsed.id.clone()) {
            return Err(Error::load(
                path.display().to_string(),
                lineno,
                format!("duplicate item id {:?}", parsed.id),
            ));
        }
        let n = parsed.choices.len();
        if n != 4 {
            let message = format!(
                "item {:?} has {n} choices (expected 4)",
                parsed.id
            );
            if strict {
                return Err(Error::load(path.display().to_string(), lineno, message));
            }
            warnings.push(format!("{}:{lineno}: {message}", path.display()));
        }
        let gold = parsed
            .answer
            .chars()
            .next()
            .and_then(|c| ChoiceLabel::parse(c, n.max(1)))
            .ok_or_else(|| {
                Error::load(
                    path.display().to_string(),
                    lineno,
                    format!("answer {:?} is not a valid label", parsed.answer),
                )
            })?;
        let item = McqItem::new(parsed.id, parsed.question, parsed.choices, gold)
            .map_err(|e| Error::load(path.display().to_string(), lineno, e.to_string()))?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::load(path.display().to_string(), 0, "no items"));
    }
    Ok((items, warnings))
}

/// Strip think-region tags a draft file may carry; stored drafts are the
/// inner text and the gateway re-adds tags when conditioning.
fn normalize_draft_text(text: &str) -> String {
    let mut t = text.trim();
    if let Some(stripped) = t.strip_prefix("<think>") {
        t = stripped.trim_start();
    }
    if let Some(stripped) = t.strip_suffix("</think>") {
        t = stripped.trim_end();
    }
    t.to_string()
}

/// Load thinking drafts keyed by (item, source model). Drafts referencing
/// unknown items are load errors; empty drafts are skipped with a warning.
pub fn load_drafts(
    path: &Path,
    items: &[McqItem],
) -> Result<(Vec<ThinkingDraft>, Vec<String>)> {
    let known: HashSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut drafts = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DraftLine = serde_json::from_str(line)
            .map_err(|e| Error::load(path.display().to_string(), lineno, e.to_string()))?;
        if !known.contains(parsed.question_id.as_str()) {
            return Err(Error::load(
                path.display().to_string(),
                lineno,
                format!("draft references unknown item {:?}", parsed.question_id),
            ));
        }
        if !seen.insert((parsed.question_id.clone(), parsed.model.clone())) {
            return Err(Error::load(
                path.display().to_string(),
                lineno,
                format!(
                    "duplicate draft for item {:?} from model {:?}",
                    parsed.question_id, parsed.model
                ),
            ));
        }
        let text = normalize_draft_text(&parsed.draft_text);
        if text.is_empty() {
            warnings.push(format!(
                "{}:{lineno}: empty draft for item {:?} skipped",
                path.display(),
                parsed.question_id
            ));
            continue;
        }
        drafts.push(ThinkingDraft::new(parsed.question_id, parsed.model, text));
    }
    Ok((drafts, warnings))
}
