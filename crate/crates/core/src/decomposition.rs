//! Draft decomposition: the annotator prompt, the delimiter grammar for
//! parsing annotated traces back into labeled steps, exploitation-block
//! partitioning, and insertion-point planning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ReasoningStep, StepKind};
use crate::template::fill_slots;

/// Delimiter tokens emitted by the annotator. Fixed byte sequences.
pub const DELIM_CONTINUE: &str = "<continue_reasoning>";
pub const DELIM_SELF_REFLECTION: &str = "<self_reflection>";
pub const DELIM_ALTERNATIVE: &str = "<alternative_approach>";

const DECOMPOSE_TEMPLATE: &str = include_str!("../templates/decompose.txt");

/// A maximal run of steps beginning with a backtrack step (except possibly
/// the first block, which may be continue-only), covering `start..end` of
/// the step sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitationBlock {
    pub start: usize,
    pub end: usize,
    pub starts_with_backtrack: bool,
}

impl ExploitationBlock {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// The three insertion positions for intra-draft interventions. Each value
/// is the number of steps retained before the inserted step, i.e. the
/// position just after the last step of the chosen block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub initial: usize,
    pub middle: usize,
    pub end: usize,
}

impl InsertionPlan {
    pub fn position(&self, location: InsertLocation) -> usize {
        match location {
            InsertLocation::Initial => self.initial,
            InsertLocation::Middle => self.middle,
            InsertLocation::End => self.end,
        }
    }
}

/// Which exploitation block an intervention is appended to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertLocation {
    Initial,
    Middle,
    End,
}

impl InsertLocation {
    pub const ALL: [InsertLocation; 3] = [
        InsertLocation::Initial,
        InsertLocation::Middle,
        InsertLocation::End,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InsertLocation::Initial => "initial",
            InsertLocation::Middle => "middle",
            InsertLocation::End => "end",
        }
    }
}

/// Build the annotator prompt that decomposes a raw draft into labeled
/// steps. The template is reproduced verbatim apart from the single
/// `{reasoning_trace}` slot.
pub fn build_decomposition_prompt(draft_text: &str) -> Result<String> {
    if draft_text.trim().is_empty() {
        return Err(Error::EmptyInput("draft text"));
    }
    Ok(fill_slots(
        DECOMPOSE_TEMPLATE,
        &[("{reasoning_trace}", draft_text)],
    ))
}

/// The raw decomposition template, exposed for fixture checks.
pub fn decomposition_template() -> &'static str {
    DECOMPOSE_TEMPLATE
}

/// Parse an annotated trace into steps.
///
/// Every occurrence of a known delimiter opens a new step;
/// `self_reflection` and `alternative_approach` both map to
/// [`StepKind::Backtrack`]. Stray prose before the first delimiter is
/// prepended to the first step so no draft content is lost, and steps whose
/// body trims to nothing are dropped.
pub fn parse_decomposed_trace(annotated: &str) -> Result<Vec<ReasoningStep>> {
    check_unknown_delimiters(annotated)?;

    // Locate every delimiter occurrence in order.
    let mut marks: Vec<(usize, usize, StepKind)> = Vec::new();
    for (token, kind) in [
        (DELIM_CONTINUE, StepKind::Continue),
        (DELIM_SELF_REFLECTION, StepKind::Backtrack),
        (DELIM_ALTERNATIVE, StepKind::Backtrack),
    ] {
        let mut from = 0;
        while let Some(found) = annotated[from..].find(token) {
            let at = from + found;
            marks.push((at, at + token.len(), kind));
            from = at + token.len();
        }
    }
    if marks.is_empty() {
        return Err(Error::NoDelimiter {
            raw: annotated.to_string(),
        });
    }
    marks.sort_by_key(|(start, _, _)| *start);

    let preamble = annotated[..marks[0].0].trim().to_string();
    let mut steps = Vec::with_capacity(marks.len());
    for (i, (_, body_start, kind)) in marks.iter().enumerate() {
        let body_end = marks.get(i + 1).map_or(annotated.len(), |m| m.0);
        let mut text = annotated[*body_start..body_end].trim().to_string();
        if i == 0 && !preamble.is_empty() {
            text = if text.is_empty() {
                preamble.clone()
            } else {
                format!("{preamble}\n{text}")
            };
        }
        if text.is_empty() {
            continue;
        }
        steps.push(ReasoningStep::new(*kind, text));
    }
    Ok(steps)
}

/// Reject lines that look like delimiters but are not one of the three
/// known tokens, e.g. `<verification>` on its own line.
fn check_unknown_delimiters(annotated: &str) -> Result<()> {
    for line in annotated.lines() {
        let line = line.trim();
        if !(line.starts_with('<') && line.ends_with('>') && line.len() > 2) {
            continue;
        }
        let inner = &line[1..line.len() - 1];
        if !inner.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            continue;
        }
        if line != DELIM_CONTINUE && line != DELIM_SELF_REFLECTION && line != DELIM_ALTERNATIVE {
            return Err(Error::UnknownDelimiter(inner.to_string()));
        }
    }
    Ok(())
}

/// Re-serialize steps in the annotator's own format. Backtrack steps are
/// written with the `self_reflection` delimiter; the parse round trip is
/// identity on kind and text.
pub fn serialize_steps(steps: &[ReasoningStep]) -> String {
    steps
        .iter()
        .map(|s| {
            let delim = match s.kind {
                StepKind::Continue => DELIM_CONTINUE,
                StepKind::Backtrack => DELIM_SELF_REFLECTION,
            };
            format!("{delim}\n\n{}", s.text)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Canonical reconstruction of a draft's text from its steps: bodies
/// joined by one blank line.
pub fn reconstruct_raw_text(steps: &[ReasoningStep]) -> String {
    steps
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Greedy left-to-right partition into exploitation blocks: a new block
/// opens at every backtrack step; leading continue steps form the first
/// block on their own.
pub fn partition_blocks(steps: &[ReasoningStep]) -> Result<Vec<ExploitationBlock>> {
    if steps.is_empty() {
        return Err(Error::EmptyInput("steps"));
    }
    let mut blocks: Vec<ExploitationBlock> = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        let opens_block = step.kind == StepKind::Backtrack || blocks.is_empty();
        if opens_block {
            blocks.push(ExploitationBlock {
                start: i,
                end: i + 1,
                starts_with_backtrack: step.kind == StepKind::Backtrack,
            });
        } else {
            blocks.last_mut().expect("non-empty").end = i + 1;
        }
    }
    Ok(blocks)
}

/// Pick the three insertion positions: after the first block, after block
/// ceil(m/2) (1-based), and after the last block. With one block all three
/// coincide.
pub fn plan_insertions(blocks: &[ExploitationBlock]) -> Result<InsertionPlan> {
    if blocks.is_empty() {
        return Err(Error::EmptyInput("blocks"));
    }
    let m = blocks.len();
    let middle_index = m.div_ceil(2) - 1;
    Ok(InsertionPlan {
        initial: blocks[0].end,
        middle: blocks[middle_index].end,
        end: blocks[m - 1].end,
    })
}
