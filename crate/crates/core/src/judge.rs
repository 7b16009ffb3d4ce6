//! Behavior classification of intervened continuations and conclusion
//! extraction (the `ans` operator). Classification uses one of four
//! templates chosen by intervention family and step variant; extraction
//! runs a deterministic pattern pass first and only falls back to the
//! judge endpoint when no pattern matches.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::interventions::{CorruptMeta, InterventionFamily, IntraKind};
use crate::jsonx::first_json_object;
use crate::model::{
    render_choice_lines, render_label_list, shifted_choices, ChoiceLabel, McqItem, StepKind,
};
use crate::template::fill_slots;

const JUDGE_SHIFT_CONTINUE: &str = include_str!("../templates/judge_shift_continue.txt");
const JUDGE_SHIFT_BACKTRACK: &str = include_str!("../templates/judge_shift_backtrack.txt");
const JUDGE_CORRUPT_CONTINUE: &str = include_str!("../templates/judge_corrupt_continue.txt");
const JUDGE_CORRUPT_BACKTRACK: &str = include_str!("../templates/judge_corrupt_backtrack.txt");
const EXTRACT_TEMPLATE: &str = include_str!("../templates/extract_answer.txt");

/// The two behavior categories a judged response falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    ExplicitlyCorrected,
    ConsistentlyFollowed,
}

impl Judgment {
    fn from_token(token: &str) -> Option<Judgment> {
        match token.trim().to_ascii_uppercase().as_str() {
            "EXPLICITLY_CORRECTED" => Some(Judgment::ExplicitlyCorrected),
            "CONSISTENTLY_FOLLOWED" => Some(Judgment::ConsistentlyFollowed),
            _ => None,
        }
    }
}

/// Parsed judge output for one intervened continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judgment: Judgment,
    pub final_answer: Option<ChoiceLabel>,
    pub explanation: String,
}

/// Build the classification prompt for an intervened continuation.
///
/// The template is selected by (family, variant); corrupt kinds require
/// the annotator's corrupt metadata for the misleading-element slots.
pub fn build_judge_prompt(
    kind: IntraKind,
    item: &McqItem,
    perturbed_step: &str,
    response: &str,
    corrupt_meta: Option<&CorruptMeta>,
) -> Result<String> {
    let original_mapping = render_choice_lines(&item.choices);
    let label_list = render_label_list(item.n());
    match kind.family {
        InterventionFamily::ShiftMapping => {
            let template = match kind.variant {
                StepKind::Continue => JUDGE_SHIFT_CONTINUE,
                StepKind::Backtrack => JUDGE_SHIFT_BACKTRACK,
            };
            let remapped = render_choice_lines(&shifted_choices(&item.choices));
            Ok(fill_slots(
                template,
                &[
                    ("{original_mapping}", &original_mapping),
                    ("{remapped_mapping}", &remapped),
                    ("{perturbed_step}", perturbed_step),
                    ("{response}", response),
                    ("{label_list}", &label_list),
                ],
            ))
        }
        InterventionFamily::CorruptOption => {
            let meta = corrupt_meta.ok_or(Error::MissingCorruptMeta)?;
            let template = match kind.variant {
                StepKind::Continue => JUDGE_CORRUPT_CONTINUE,
                StepKind::Backtrack => JUDGE_CORRUPT_BACKTRACK,
            };
            Ok(fill_slots(
                template,
                &[
                    ("{question}", &item.question),
                    ("{original_mapping}", &original_mapping),
                    ("{perturbed_step}", perturbed_step),
                    ("{perturbed_element}", &meta.perturbed_option),
                    ("{perturbed_step_explanation}", &meta.explanation),
                    ("{response}", response),
                    ("{label_list}", &label_list),
                ],
            ))
        }
    }
}

/// Parse a judge response into a verdict. Judgment tokens are matched
/// case-insensitively; the final answer may be a bare letter, a
/// parenthesized letter, or null.
pub fn parse_verdict(text: &str, n: usize) -> Result<JudgeVerdict> {
    let value = first_json_object(text)
        .ok_or_else(|| Error::JudgeFormat("no JSON object in judge response".into()))?;
    let token = value
        .get("judgment")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::JudgeFormat("missing judgment field".into()))?;
    let judgment = Judgment::from_token(token)
        .ok_or_else(|| Error::JudgeFormat(format!("unknown judgment token {token:?}")))?;
    let final_answer = value
        .get("final_answer")
        .and_then(|v| v.as_str())
        .and_then(|s| label_from_field(s, n));
    let explanation = value
        .get("explanation")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    Ok(JudgeVerdict {
        judgment,
        final_answer,
        explanation,
    })
}

fn label_from_field(field: &str, n: usize) -> Option<ChoiceLabel> {
    field
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .and_then(|c| ChoiceLabel::parse(c, n))
}

fn terminal_patterns() -> &'static [Regex; 3] {
    static PATTERNS: OnceLock<[Regex; 3]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            Regex::new(r"(?i)the final answer should be[:\s]*\**[\(\[]?([A-Za-z])\b").unwrap(),
            Regex::new(r"(?i)the answer is[:\s]*\**[\(\[]?([A-Za-z])\b").unwrap(),
            Regex::new(r"\(([A-Za-z])\)\s*\.?\s*$").unwrap(),
        ]
    })
}

/// Deterministic pattern pass of the `ans` extractor: scan for terminal
/// answer statements and take the last one by position. Returns `None`
/// when nothing matches, which is the cue to fall back to the LLM stage.
pub fn pattern_extract_conclusion(text: &str, n: usize) -> Option<ChoiceLabel> {
    let mut best: Option<(usize, ChoiceLabel)> = None;
    for pattern in terminal_patterns() {
        for caps in pattern.captures_iter(text) {
            let m = caps.get(1).expect("capture group");
            let Some(label) = ChoiceLabel::parse(m.as_str().chars().next().unwrap(), n) else {
                continue;
            };
            if best.is_none_or(|(pos, _)| m.start() >= pos) {
                best = Some((m.start(), label));
            }
        }
    }
    best.map(|(_, label)| label)
}

/// Parse the forced immediate answer from the first emitted line: the
/// first standalone uppercase letter that is a valid label, tolerating
/// parentheses and brackets. Lowercase is rejected here so prose like
/// "not a valid question" never reads as label A.
pub fn parse_immediate_label(text: &str, n: usize) -> Option<ChoiceLabel> {
    static LETTER: OnceLock<Regex> = OnceLock::new();
    let letter = LETTER.get_or_init(|| Regex::new(r"[\(\[]?\b([A-Z])\b[\)\]]?").unwrap());
    let first_line = text.lines().next().unwrap_or_default();
    letter
        .captures_iter(first_line)
        .filter_map(|caps| ChoiceLabel::parse(caps[1].chars().next().unwrap(), n))
        .next()
}

/// Build the LLM extraction prompt used when the pattern pass is
/// ambiguous.
pub fn build_extraction_prompt(text: &str, n: usize) -> String {
    fill_slots(
        EXTRACT_TEMPLATE,
        &[
            ("{text}", text),
            ("{label_list}", &render_label_list(n)),
        ],
    )
}

/// Parse the extraction response; a malformed response yields `None`
/// rather than an error, since extraction failure is recorded as a null
/// conclusion.
pub fn parse_extraction_response(text: &str, n: usize) -> Option<ChoiceLabel> {
    let value = first_json_object(text)?;
    value
        .get("final_answer")
        .and_then(|v| v.as_str())
        .and_then(|s| label_from_field(s, n))
}

/// The full two-stage `ans` extractor: deterministic pattern pass first,
/// judge-endpoint extraction only when no pattern matched. Returns the
/// cache key of the LLM call (when one was made) so records can reference
/// the persisted text.
pub async fn extract_conclusion(
    judge: &Gateway,
    item: &McqItem,
    text: &str,
) -> Result<(Option<ChoiceLabel>, Option<String>)> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("extraction text"));
    }
    let n = item.n();
    if let Some(label) = pattern_extract_conclusion(text, n) {
        return Ok((Some(label), None));
    }
    let prompt = build_extraction_prompt(text, n);
    let generation = judge.call_judge(&prompt).await?;
    Ok((
        parse_extraction_response(&generation.text, n),
        Some(generation.key),
    ))
}
