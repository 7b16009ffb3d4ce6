//! Run configuration: the TOML schema, scenario selection, and the
//! redacted config digest used for report provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::EndpointConfig;
use crate::interventions::{EditKind, IntraKind, WrongChoicePolicy};
use crate::model::AnswerMode;

/// One selectable scenario: an intra-draft intervention or a
/// draft-to-answer condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Intra(IntraKind),
    Dta { edit: EditKind, mode: AnswerMode },
}

impl Scenario {
    pub fn id(&self) -> String {
        match self {
            Scenario::Intra(kind) => kind.id(),
            Scenario::Dta { edit, mode } => format!("{}-{mode}", edit.as_str()),
        }
    }

    /// All 16 scenarios in canonical order: the 12 intra interventions,
    /// then the 4 draft-to-answer conditions.
    pub fn all() -> Vec<Scenario> {
        let mut scenarios: Vec<Scenario> = IntraKind::all().into_iter().map(Scenario::Intra).collect();
        for edit in [EditKind::DirectAlternating, EditKind::PlausibleAlternating] {
            for mode in [AnswerMode::Standard, AnswerMode::Immediate] {
                scenarios.push(Scenario::Dta { edit, mode });
            }
        }
        scenarios
    }

    /// Expand a selection spec (`all`, `intra`, `dta`, or scenario ids)
    /// into canonical-order scenarios.
    pub fn parse_selection(specs: &[String]) -> Result<Vec<Scenario>> {
        let all = Scenario::all();
        let mut selected: Vec<bool> = vec![false; all.len()];
        for spec in specs {
            match spec.as_str() {
                "all" => selected.iter_mut().for_each(|s| *s = true),
                "intra" => all
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| matches!(s, Scenario::Intra(_)))
                    .for_each(|(i, _)| selected[i] = true),
                "dta" => all
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| matches!(s, Scenario::Dta { .. }))
                    .for_each(|(i, _)| selected[i] = true),
                other => {
                    let at = all
                        .iter()
                        .position(|s| s.id() == other)
                        .ok_or_else(|| Error::Config(format!("unknown scenario {other:?}")))?;
                    selected[at] = true;
                }
            }
        }
        let scenarios: Vec<Scenario> = all
            .into_iter()
            .zip(selected)
            .filter_map(|(s, on)| on.then_some(s))
            .collect();
        if scenarios.is_empty() {
            return Err(Error::Config("no scenarios selected".into()));
        }
        Ok(scenarios)
    }
}

fn default_scenarios() -> Vec<String> {
    vec!["all".into()]
}

fn default_policy() -> WrongChoicePolicy {
    WrongChoicePolicy::CyclicNext
}

/// Declarative run configuration (TOML). Secrets always come from the
/// environment variables named by the endpoint configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset file: one JSON object per line with
    /// `{id, question, choices: [..], answer: "A"}`.
    pub dataset: PathBuf,
    /// Label used in report group keys; defaults to the dataset file stem.
    #[serde(default)]
    pub dataset_label: Option<String>,
    /// Draft file (`{question_id, model, draft_text}` per line). Absent
    /// means drafts are self-generated by each target.
    #[serde(default)]
    pub drafts: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<String>,
    /// Reject items whose choice count differs from 4 instead of warning.
    #[serde(default)]
    pub strict_dataset: bool,
    #[serde(default = "default_policy")]
    pub wrong_choice_policy: WrongChoicePolicy,
    #[serde(default)]
    pub resume: bool,
    /// Stop after this many trial units (0 = unlimited). Smoke-test knob;
    /// also simulates an interrupted run.
    #[serde(default)]
    pub max_trials: usize,
    pub target: Vec<EndpointConfig>,
    pub annotator: EndpointConfig,
    pub judge: EndpointConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Config("at least one [[target]] endpoint required".into()));
        }
        Scenario::parse_selection(&self.scenarios)?;
        Ok(())
    }

    pub fn dataset_label(&self) -> String {
        self.dataset_label.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    /// Digest of the semantic configuration: run-instance fields
    /// (output directory, resume, trial cap) are redacted so reruns of the
    /// same experiment produce the same digest.
    pub fn semantic_digest(&self) -> String {
        let mut redacted = self.clone();
        redacted.output_dir = PathBuf::new();
        redacted.resume = false;
        redacted.max_trials = 0;
        let body = serde_json::to_string(&redacted).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(body.as_bytes());
        hex::encode(hasher.finalize())
    }
}
