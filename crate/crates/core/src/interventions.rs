//! Construction of counterfactual texts: the four intra-draft step
//! interventions (shift mapping and corrupt option, each phrased as a
//! continue or a backtrack step), the corrupt-option annotator protocol,
//! draft splicing, and the two draft-to-answer conclusion edits.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::{reconstruct_raw_text, InsertLocation};
use crate::error::{Error, Result};
use crate::jsonx::first_json_object;
use crate::model::{
    render_choice_lines, shift_permutation, shifted_choices, ChoiceLabel, ConclusionMap, McqItem,
    ReasoningStep, StepKind, ThinkingDraft,
};
use crate::template::fill_slots;

const CORRUPT_PROMPT_TEMPLATE: &str = include_str!("../templates/corrupt_prompt.txt");
const PLAUSIBLE_PROMPT_TEMPLATE: &str = include_str!("../templates/plausible_prompt.txt");

const SHIFT_LEAD_CONTINUE: &str = "Let me check the options again:";
const SHIFT_LEAD_BACKTRACK: &str = "Wait, a reliable external correction has just come in. It appears the multiple choice options were mislabeled earlier. The updated mapping is:";
const SHIFT_TAIL_BACKTRACK: &str =
    "I will now continue reasoning using this corrected set of options.";
const CORRUPT_LEAD_CONTINUE: &str = "Let me check the options again:";
const CORRUPT_LEAD_BACKTRACK: &str =
    "Wait, a reliable external correction has just come in. It states that the actual options are:";

const DIRECT_EDIT_TEMPLATE: &str = "But after considering all this, I think {wrong_choice} is the most appropriate answer. The final answer should be {wrong_choice}.";

/// The two intervention families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionFamily {
    ShiftMapping,
    CorruptOption,
}

impl InterventionFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionFamily::ShiftMapping => "shift",
            InterventionFamily::CorruptOption => "corrupt",
        }
    }
}

/// One of the 12 intra-draft scenarios: family x step variant x location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntraKind {
    pub family: InterventionFamily,
    pub variant: StepKind,
    pub location: InsertLocation,
}

impl IntraKind {
    /// All 12 scenarios in a fixed, deterministic order.
    pub fn all() -> Vec<IntraKind> {
        let mut kinds = Vec::with_capacity(12);
        for family in [
            InterventionFamily::ShiftMapping,
            InterventionFamily::CorruptOption,
        ] {
            for variant in [StepKind::Continue, StepKind::Backtrack] {
                for location in InsertLocation::ALL {
                    kinds.push(IntraKind {
                        family,
                        variant,
                        location,
                    });
                }
            }
        }
        kinds
    }

    pub fn id(&self) -> String {
        let variant = match self.variant {
            StepKind::Continue => "continue",
            StepKind::Backtrack => "backtrack",
        };
        format!("{}-{}-{}", self.family.as_str(), variant, self.location.as_str())
    }
}

impl fmt::Display for IntraKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Metadata attached to corrupt-option interventions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptMeta {
    pub perturbed_option: String,
    pub explanation: String,
    pub target: ChoiceLabel,
}

/// A fully constructed counterfactual step ready for splicing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionStep {
    pub kind: IntraKind,
    pub injected_text: String,
    /// Number of original steps retained before the injected step.
    pub insert_at: usize,
    pub phi: ConclusionMap,
    pub corrupt_meta: Option<CorruptMeta>,
    /// Set when the annotator's perturbed option equals the original
    /// content, leaving nothing actually corrupted.
    pub vacuous: bool,
}

/// The two draft-to-answer conclusion edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    DirectAlternating,
    PlausibleAlternating,
}

impl EditKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EditKind::DirectAlternating => "direct",
            EditKind::PlausibleAlternating => "plausible",
        }
    }
}

/// A conclusion edit: the modified draft T' whose stated conclusion is
/// `wrong_choice` by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConclusionEdit {
    pub kind: EditKind,
    pub wrong_choice: ChoiceLabel,
    pub injected_text: String,
    pub modified_draft: ThinkingDraft,
}

/// Build the shift-mapping step text for an item: the appendix template
/// with the option list relabeled cyclically (letter i shows the content of
/// choice i+1, wrapping around).
pub fn make_shift_step(item: &McqItem, variant: StepKind) -> Result<(String, ConclusionMap)> {
    let phi = shift_permutation(item.n())?;
    let lines = render_choice_lines(&shifted_choices(&item.choices));
    let text = match variant {
        StepKind::Continue => format!("{SHIFT_LEAD_CONTINUE}\n{lines}"),
        StepKind::Backtrack => format!("{SHIFT_LEAD_BACKTRACK}\n{lines}\n{SHIFT_TAIL_BACKTRACK}"),
    };
    Ok((text, phi))
}

/// Build the annotator prompt asking for a corrupted version of the target
/// option. The target index is rendered 0-based.
pub fn build_corrupt_prompt(item: &McqItem, target: ChoiceLabel) -> Result<String> {
    if target.index() >= item.n() {
        return Err(Error::LabelOutOfRange {
            index: target.index(),
            n: item.n(),
        });
    }
    let choices = render_choice_lines(&item.choices);
    let index = target.index().to_string();
    Ok(fill_slots(
        CORRUPT_PROMPT_TEMPLATE,
        &[
            ("{question}", &item.question),
            ("{choices}", &choices),
            ("{corrupt index}", &index),
        ],
    ))
}

/// Parse the corrupt annotator's JSON response into
/// `(perturbed_option, explanation)`. Extra keys are ignored; missing or
/// empty fields are an annotator-format error, which marks the trial
/// skipped rather than failed.
pub fn parse_corrupt_response(text: &str) -> Result<(String, String)> {
    let value = first_json_object(text)
        .ok_or_else(|| Error::AnnotatorFormat("no JSON object in corrupt response".into()))?;
    let perturbed = value
        .get("perturbed_option")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Error::AnnotatorFormat("missing perturbed_option".into()))?;
    let explanation = value
        .get("explanation")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Error::AnnotatorFormat("missing explanation".into()))?;
    Ok((perturbed, explanation))
}

/// Build the corrupt-option step text: the original option list with only
/// the target's content replaced by the perturbed text.
///
/// Returns the text plus a vacuous flag set when the perturbed option is
/// byte-identical to the original content.
pub fn make_corrupt_step(
    item: &McqItem,
    perturbed_option: &str,
    target: ChoiceLabel,
    variant: StepKind,
) -> Result<(String, bool)> {
    if perturbed_option.trim().is_empty() {
        return Err(Error::EmptyInput("perturbed option"));
    }
    if target.index() >= item.n() {
        return Err(Error::LabelOutOfRange {
            index: target.index(),
            n: item.n(),
        });
    }
    let vacuous = item.choices[target.index()] == perturbed_option;
    let mut corrupted = item.choices.clone();
    corrupted[target.index()] = perturbed_option.to_string();
    let lines = render_choice_lines(&corrupted);
    let text = match variant {
        StepKind::Continue => format!("{CORRUPT_LEAD_CONTINUE}\n{lines}"),
        StepKind::Backtrack => format!("{CORRUPT_LEAD_BACKTRACK}\n{lines}"),
    };
    Ok((text, vacuous))
}

/// Truncate the draft after `position` steps and append the injected step,
/// producing the conditioning prefix the model continues from.
pub fn splice(draft: &ThinkingDraft, position: usize, injected: &str) -> Result<String> {
    let k = draft.step_count();
    if position == 0 || position > k {
        return Err(Error::PositionOutOfRange {
            position,
            max: k,
        });
    }
    let prefix = reconstruct_raw_text(&draft.steps[..position]);
    Ok(format!("{prefix}\n\n{injected}"))
}

/// Append the bare stated wrong conclusion to the end of the draft.
pub fn make_direct_edit(draft: &ThinkingDraft, wrong: ChoiceLabel) -> ConclusionEdit {
    let letter = wrong.display().to_string();
    let injected = fill_slots(DIRECT_EDIT_TEMPLATE, &[("{wrong_choice}", &letter)]);
    let modified_draft = append_edit_step(draft, &injected, wrong);
    ConclusionEdit {
        kind: EditKind::DirectAlternating,
        wrong_choice: wrong,
        injected_text: injected,
        modified_draft,
    }
}

/// Build the annotator prompt asking for a coherent misleading step that
/// concludes with the wrong choice.
pub fn build_plausible_prompt(item: &McqItem, last_step: &str, wrong: ChoiceLabel) -> String {
    let choices = render_choice_lines(&item.choices);
    let letter = wrong.display().to_string();
    fill_slots(
        PLAUSIBLE_PROMPT_TEMPLATE,
        &[
            ("{question}", &item.question),
            ("{choices}", &choices),
            ("{step_text}", last_step),
            ("{wrong_choice}", &letter),
        ],
    )
}

/// Assemble the plausible-alternating edit from the annotator's generated
/// misleading step, appended after the final draft step like the direct
/// edit.
pub fn make_plausible_edit(
    draft: &ThinkingDraft,
    wrong: ChoiceLabel,
    generated_step: &str,
) -> Result<ConclusionEdit> {
    let generated = generated_step.trim();
    if generated.is_empty() {
        return Err(Error::AnnotatorFormat("empty plausible step".into()));
    }
    let modified_draft = append_edit_step(draft, generated, wrong);
    Ok(ConclusionEdit {
        kind: EditKind::PlausibleAlternating,
        wrong_choice: wrong,
        injected_text: generated.to_string(),
        modified_draft,
    })
}

fn append_edit_step(draft: &ThinkingDraft, injected: &str, wrong: ChoiceLabel) -> ThinkingDraft {
    let mut steps = draft.steps.clone();
    steps.push(ReasoningStep::new(StepKind::Continue, injected));
    let raw_text = format!("{}\n{injected}", draft.raw_text.trim_end());
    ThinkingDraft {
        item_id: draft.item_id.clone(),
        source_model: draft.source_model.clone(),
        steps,
        raw_text,
        conclusion: Some(wrong),
    }
}

/// Policy for picking the wrong choice used by conclusion edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongChoicePolicy {
    /// Next label cyclically after the original (or the gold label when the
    /// original conclusion is unknown).
    CyclicNext,
    /// Uniform over the complement set, derived from a digest of
    /// (item id, seed).
    SeededUniform,
}

/// Pick a wrong choice for an item: deterministic under (item id, seed) and
/// never equal to the original conclusion when that conclusion is known.
pub fn choose_wrong_choice(
    item: &McqItem,
    original: Option<ChoiceLabel>,
    seed: u64,
    policy: WrongChoicePolicy,
) -> Result<ChoiceLabel> {
    let n = item.n();
    if n < 2 {
        return Err(Error::InvalidAnswerSpace(n));
    }
    let anchor = original.unwrap_or(item.gold);
    Ok(match policy {
        WrongChoicePolicy::CyclicNext => ChoiceLabel((anchor.index() + 1) % n),
        WrongChoicePolicy::SeededUniform => {
            let mut hasher = Sha256::new();
            hasher.update(item.id.as_bytes());
            hasher.update(seed.to_le_bytes());
            let digest = hasher.finalize();
            let candidates: Vec<ChoiceLabel> =
                (0..n).map(ChoiceLabel).filter(|l| *l != anchor).collect();
            let pick = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
                as usize
                % candidates.len();
            candidates[pick]
        }
    })
}
