//! Domain types shared by every module: answer labels, questions, drafts,
//! answer-stage results, and the conclusion-mapping function applied by
//! interventions. Everything here is an immutable value with no I/O.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One answer choice, identified by its position in the option list.
///
/// The display letter is derived from the index (`0 -> A`, `1 -> B`, ...),
/// so index and letter are a bijection for a fixed answer-space size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChoiceLabel(pub usize);

impl ChoiceLabel {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn display(self) -> char {
        (b'A' + (self.0 as u8)) as char
    }

    /// Parse a display letter back into a label, checked against the
    /// answer-space size.
    pub fn parse(letter: char, n: usize) -> Option<ChoiceLabel> {
        let upper = letter.to_ascii_uppercase();
        if !upper.is_ascii_uppercase() {
            return None;
        }
        let index = (upper as u8 - b'A') as usize;
        (index < n).then_some(ChoiceLabel(index))
    }
}

impl fmt::Display for ChoiceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.display())
    }
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub gold: ChoiceLabel,
}

impl McqItem {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        choices: Vec<String>,
        gold: ChoiceLabel,
    ) -> Result<Self> {
        if choices.len() < 2 {
            return Err(Error::InvalidAnswerSpace(choices.len()));
        }
        if choices.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::EmptyInput("choice text"));
        }
        if gold.index() >= choices.len() {
            return Err(Error::LabelOutOfRange {
                index: gold.index(),
                n: choices.len(),
            });
        }
        Ok(McqItem {
            id: id.into(),
            question: question.into(),
            choices,
            gold,
        })
    }

    /// Number of answer choices.
    pub fn n(&self) -> usize {
        self.choices.len()
    }

    /// All labels of the answer space, in order.
    pub fn labels(&self) -> impl Iterator<Item = ChoiceLabel> {
        (0..self.n()).map(ChoiceLabel)
    }
}

/// Render an option list as the lettered lines used throughout the prompt
/// templates: `A) first\nB) second\n...`.
pub fn render_choice_lines(choices: &[String]) -> String {
    let mut out = String::new();
    for (i, choice) in choices.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("{}) {}", ChoiceLabel(i).display(), choice));
    }
    out
}

/// The option contents after the cyclic relabeling used by shift
/// interventions: position `i` carries the content of choice `(i + 1) mod n`.
pub fn shifted_choices(choices: &[String]) -> Vec<String> {
    let n = choices.len();
    (0..n).map(|i| choices[(i + 1) % n].clone()).collect()
}

/// Render an option list inline, as in chat question preambles:
/// `(A) first (B) second ...`.
pub fn render_choices_inline(choices: &[String]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", ChoiceLabel(i).display(), c))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `A, B, C, or D` for n = 4; generalizes to any answer-space size.
pub fn render_label_list(n: usize) -> String {
    let letters: Vec<String> = (0..n).map(|i| ChoiceLabel(i).display().to_string()).collect();
    match letters.len() {
        0 => String::new(),
        1 => letters[0].clone(),
        2 => format!("{} or {}", letters[0], letters[1]),
        _ => format!(
            "{}, or {}",
            letters[..letters.len() - 1].join(", "),
            letters[letters.len() - 1]
        ),
    }
}

/// Kind of a reasoning step inside a thinking draft.
///
/// `Backtrack` covers both annotator labels `self_reflection` and
/// `alternative_approach`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Continue,
    Backtrack,
}

/// One decomposed reasoning step, text preserved verbatim from the draft.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub kind: StepKind,
    pub text: String,
}

impl ReasoningStep {
    pub fn new(kind: StepKind, text: impl Into<String>) -> Self {
        ReasoningStep {
            kind,
            text: text.into(),
        }
    }
}

/// A thinking draft: the ordered reasoning steps a model emitted inside its
/// think region, plus the raw text they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkingDraft {
    pub item_id: String,
    pub source_model: String,
    /// Populated by the decomposition pipeline; may be empty for a draft
    /// loaded straight from a file.
    pub steps: Vec<ReasoningStep>,
    pub raw_text: String,
    /// The draft's own stated conclusion, filled in by the extraction
    /// pipeline; `None` when nothing extractable was found.
    pub conclusion: Option<ChoiceLabel>,
}

impl ThinkingDraft {
    pub fn new(
        item_id: impl Into<String>,
        source_model: impl Into<String>,
        raw_text: impl Into<String>,
    ) -> Self {
        ThinkingDraft {
            item_id: item_id.into(),
            source_model: source_model.into(),
            steps: Vec::new(),
            raw_text: raw_text.into(),
            conclusion: None,
        }
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }
}

/// Whether the answer stage was allowed free explanation or forced to
/// answer immediately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Standard,
    Immediate,
}

impl fmt::Display for AnswerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerMode::Standard => write!(f, "standard"),
            AnswerMode::Immediate => write!(f, "immediate"),
        }
    }
}

/// Result of one answer-stage generation.
///
/// Immediate answering forbids any explanation, so `mode == Immediate`
/// implies `explanation.is_empty()` (enforced by the constructors).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerStageResult {
    pub explanation: String,
    pub final_answer: Option<ChoiceLabel>,
    pub mode: AnswerMode,
}

impl AnswerStageResult {
    pub fn standard(explanation: impl Into<String>, final_answer: Option<ChoiceLabel>) -> Self {
        AnswerStageResult {
            explanation: explanation.into(),
            final_answer,
            mode: AnswerMode::Standard,
        }
    }

    pub fn immediate(final_answer: Option<ChoiceLabel>) -> Self {
        AnswerStageResult {
            explanation: String::new(),
            final_answer,
            mode: AnswerMode::Immediate,
        }
    }
}

/// The mapping from a draft's original conclusion to the conclusion a
/// faithful model should reach after following an inserted counterfactual
/// step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConclusionMap {
    /// A bijection on labels; `mapping[i]` is where original label `i`
    /// lands. Used by shift-mapping interventions.
    Permutation { mapping: Vec<usize> },
    /// The expected set is every label except the original. Used by
    /// corrupt-option interventions.
    Complement,
}

impl ConclusionMap {
    /// Apply a permutation map to one label. Complement maps have no single
    /// image, so this returns `None` for them.
    pub fn apply(&self, label: ChoiceLabel) -> Option<ChoiceLabel> {
        match self {
            ConclusionMap::Permutation { mapping } => {
                mapping.get(label.index()).copied().map(ChoiceLabel)
            }
            ConclusionMap::Complement => None,
        }
    }
}

/// The conclusion map induced by the cyclic option relabeling used in shift
/// interventions.
///
/// The relabeled list shows the content of choice `(i + 1) mod n` under
/// letter `i`, so the content originally at label `j` reappears under label
/// `(j - 1) mod n`. For n = 4 this sends A to D, B to A, C to B, D to C.
pub fn shift_permutation(n: usize) -> Result<ConclusionMap> {
    if n < 2 {
        return Err(Error::InvalidAnswerSpace(n));
    }
    let mapping = (0..n).map(|j| (j + n - 1) % n).collect();
    Ok(ConclusionMap::Permutation { mapping })
}

/// The set of conclusions a faithful step-following response may reach.
///
/// Permutation maps yield the singleton image of the original label;
/// Complement yields every label except the original.
pub fn expected_conclusions(
    map: &ConclusionMap,
    original: ChoiceLabel,
    n: usize,
) -> Result<BTreeSet<ChoiceLabel>> {
    if original.index() >= n {
        return Err(Error::LabelOutOfRange {
            index: original.index(),
            n,
        });
    }
    Ok(match map {
        ConclusionMap::Permutation { .. } => {
            let image = map.apply(original).ok_or(Error::LabelOutOfRange {
                index: original.index(),
                n,
            })?;
            BTreeSet::from([image])
        }
        ConclusionMap::Complement => (0..n)
            .map(ChoiceLabel)
            .filter(|l| *l != original)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn display_and_parse_round_trip() {
        for i in 0..8 {
            let label = ChoiceLabel(i);
            let parsed = ChoiceLabel::parse(label.display(), 8).unwrap();
            assert_eq!(parsed, label);
        }
        assert_eq!(ChoiceLabel::parse('b', 4), Some(ChoiceLabel(1)));
        assert_eq!(ChoiceLabel::parse('E', 4), None);
        assert_eq!(ChoiceLabel::parse('?', 4), None);
    }

    #[test]
    fn shift_permutation_n4_matches_relabeled_template() {
        let map = shift_permutation(4).unwrap();
        let images: Vec<char> = (0..4)
            .map(|i| map.apply(ChoiceLabel(i)).unwrap().display())
            .collect();
        assert_eq!(images, vec!['D', 'A', 'B', 'C']);
    }

    #[test]
    fn shift_permutation_rejects_degenerate_space() {
        assert!(matches!(
            shift_permutation(1),
            Err(Error::InvalidAnswerSpace(1))
        ));
        assert!(matches!(
            shift_permutation(0),
            Err(Error::InvalidAnswerSpace(0))
        ));
    }

    #[test]
    fn applying_shift_n_times_is_identity() {
        for n in 2..=8 {
            let map = shift_permutation(n).unwrap();
            for start in 0..n {
                let mut label = ChoiceLabel(start);
                for _ in 0..n {
                    label = map.apply(label).unwrap();
                }
                assert_eq!(label, ChoiceLabel(start));
            }
        }
    }

    #[test]
    fn expected_conclusions_examples() {
        // Complement, original C, n = 4 -> {A, B, D}.
        let set = expected_conclusions(&ConclusionMap::Complement, ChoiceLabel(2), 4).unwrap();
        let letters: Vec<char> = set.iter().map(|l| l.display()).collect();
        assert_eq!(letters, vec!['A', 'B', 'D']);

        // Shift n = 4, original D -> {C}.
        let map = shift_permutation(4).unwrap();
        let set = expected_conclusions(&map, ChoiceLabel(3), 4).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.contains(&ChoiceLabel(2)));

        // Complement, original A, n = 2 -> {B}.
        let set = expected_conclusions(&ConclusionMap::Complement, ChoiceLabel(0), 2).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.contains(&ChoiceLabel(1)));
    }

    #[test]
    fn immediate_answer_has_no_explanation() {
        let result = AnswerStageResult::immediate(Some(ChoiceLabel(1)));
        assert!(result.explanation.is_empty());
        assert_eq!(result.mode, AnswerMode::Immediate);
    }

    #[test]
    fn label_list_rendering() {
        assert_eq!(render_label_list(4), "A, B, C, or D");
        assert_eq!(render_label_list(2), "A or B");
        assert_eq!(render_label_list(3), "A, B, or C");
    }

    #[test]
    fn mcq_item_rejects_bad_gold() {
        let err = McqItem::new(
            "q1",
            "?",
            vec!["a".into(), "b".into()],
            ChoiceLabel(2),
        );
        assert!(matches!(err, Err(Error::LabelOutOfRange { .. })));
    }

    proptest! {
        #[test]
        fn shift_is_fixed_point_free_bijection(n in 2usize..=8) {
            let map = shift_permutation(n).unwrap();
            let mut seen = std::collections::HashSet::new();
            for i in 0..n {
                let image = map.apply(ChoiceLabel(i)).unwrap();
                prop_assert_ne!(image, ChoiceLabel(i));
                prop_assert!(image.index() < n);
                prop_assert!(seen.insert(image));
            }
            prop_assert_eq!(seen.len(), n);
        }

        #[test]
        fn expected_set_never_empty_never_original_under_complement(
            n in 2usize..=8, orig in 0usize..8
        ) {
            prop_assume!(orig < n);
            let set = expected_conclusions(&ConclusionMap::Complement, ChoiceLabel(orig), n).unwrap();
            prop_assert!(!set.is_empty());
            prop_assert!(!set.contains(&ChoiceLabel(orig)));

            let shift = shift_permutation(n).unwrap();
            let set = expected_conclusions(&shift, ChoiceLabel(orig), n).unwrap();
            prop_assert!(!set.is_empty());
        }
    }
}
