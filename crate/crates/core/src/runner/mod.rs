//! Pipeline orchestration: dataset and draft ingestion, per-draft
//! preparation (decomposition, conclusion extraction, corrupt and
//! plausible generation), trial scheduling over the selected scenarios,
//! resumable record persistence, and report emission.

pub mod config;
pub mod data;
pub mod demo;
pub mod report;

pub use config::{RunConfig, Scenario};
pub use data::{load_drafts, load_mcq_dataset};
pub use report::{
    build_report, render_markdown, render_report, template_digest, LocationMeanCell, Provenance,
    ReportFormat, RunReport,
};

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use futures::StreamExt;
use serde_json::json;

use crate::decomposition::{
    build_decomposition_prompt, parse_decomposed_trace, partition_blocks, plan_insertions,
    InsertionPlan,
};
use crate::error::{Error, Result};
use crate::gateway::{DiskCache, Gateway, StatsSnapshot, TranscriptWriter};
use crate::interventions::{
    build_corrupt_prompt, build_plausible_prompt, choose_wrong_choice, make_corrupt_step,
    make_direct_edit, make_plausible_edit, make_shift_step, parse_corrupt_response, splice,
    ConclusionEdit, CorruptMeta, EditKind, InterventionFamily, IntraKind,
};
use crate::judge::{build_judge_prompt, extract_conclusion, parse_verdict, JudgeVerdict};
use crate::metrics::{
    score_consistency, score_record_intra, score_reliance, Answers, EvaluationRecord, Flag,
    Scores, TrialKind,
};
use crate::model::{AnswerMode, ChoiceLabel, McqItem, ThinkingDraft};

const UNIT_PARALLELISM: usize = 16;
const PREP_PARALLELISM: usize = 8;

/// Result of a completed run.
pub struct RunOutcome {
    pub report: RunReport,
    pub flagged_records: u64,
    pub report_dir: PathBuf,
}

/// Everything shared by the trials of one (item, draft) pair. Built once
/// per draft so the 12 intra scenarios share a single annotation call.
struct DraftContext {
    item: Arc<McqItem>,
    draft: ThinkingDraft,
    plan: Option<InsertionPlan>,
    decomposition_error: Option<String>,
    original: Option<ChoiceLabel>,
    corrupt: Option<CorruptMeta>,
    corrupt_error: Option<String>,
    wrong: ChoiceLabel,
    direct: Option<ConclusionEdit>,
    plausible: Option<ConclusionEdit>,
    plausible_error: Option<String>,
    prep_requests: Vec<String>,
    prep_notes: Vec<String>,
}

#[derive(Debug, Clone)]
enum UnitWork {
    Intra(IntraKind),
    Dta {
        edit: EditKind,
        modes: Vec<AnswerMode>,
    },
}

struct TrialUnit {
    target: Arc<Gateway>,
    draft_key: (String, String),
    work: UnitWork,
}

struct DraftEntry {
    item: Arc<McqItem>,
    draft: ThinkingDraft,
    targets: Vec<Arc<Gateway>>,
}

fn trial_id(item_id: &str, source: &str, model: &str, scenario_id: &str) -> String {
    format!("{item_id}|{source}|{model}|{scenario_id}")
}

fn unit_record_ids(entry: &DraftEntry, target: &Gateway, work: &UnitWork) -> Vec<String> {
    let make = |scenario_id: String| {
        trial_id(
            &entry.item.id,
            &entry.draft.source_model,
            target.model_name(),
            &scenario_id,
        )
    };
    match work {
        UnitWork::Intra(kind) => vec![make(kind.id())],
        UnitWork::Dta { edit, modes } => modes
            .iter()
            .map(|mode| make(format!("{}-{mode}", edit.as_str())))
            .collect(),
    }
}

type GatewaySet = (Vec<Arc<Gateway>>, Arc<Gateway>, Arc<Gateway>);

fn build_gateways(
    config: &RunConfig,
    cache: &DiskCache,
    transcript: &Arc<TranscriptWriter>,
) -> Result<GatewaySet> {
    let mut targets = Vec::new();
    for endpoint in &config.target {
        targets.push(Arc::new(Gateway::from_endpoint(
            endpoint.clone(),
            Some(cache.clone()),
            Some(transcript.clone()),
        )?));
    }
    let annotator = Arc::new(Gateway::from_endpoint(
        config.annotator.clone(),
        Some(cache.clone()),
        Some(transcript.clone()),
    )?);
    let judge = Arc::new(Gateway::from_endpoint(
        config.judge.clone(),
        Some(cache.clone()),
        Some(transcript.clone()),
    )?);
    Ok((targets, annotator, judge))
}

/// Load file drafts or self-generate one draft per (item, target).
/// File drafts are evaluated by every target; self-generated drafts only
/// by the model that produced them.
async fn gather_drafts(
    config: &RunConfig,
    items: &[Arc<McqItem>],
    targets: &[Arc<Gateway>],
    warnings: &mut Vec<String>,
) -> Result<Vec<DraftEntry>> {
    let mut entries = Vec::new();
    match &config.drafts {
        Some(path) => {
            let plain: Vec<McqItem> = items.iter().map(|i| (**i).clone()).collect();
            let (drafts, load_warnings) = load_drafts(path, &plain)?;
            warnings.extend(load_warnings);
            for item in items {
                for draft in drafts.iter().filter(|d| d.item_id == item.id) {
                    entries.push(DraftEntry {
                        item: item.clone(),
                        draft: draft.clone(),
                        targets: targets.to_vec(),
                    });
                }
            }
        }
        None => {
            for item in items {
                for target in targets {
                    let (draft, generation) = target.self_draft(item).await?;
                    if generation.truncated {
                        warnings.push(format!(
                            "self draft for {} by {} hit the token budget",
                            item.id,
                            target.model_name()
                        ));
                    }
                    entries.push(DraftEntry {
                        item: item.clone(),
                        draft,
                        targets: vec![target.clone()],
                    });
                }
            }
        }
    }
    Ok(entries)
}

struct PrepNeeds {
    decompose: bool,
    corrupt: bool,
    direct: bool,
    plausible: bool,
}

fn prep_needs(scenarios: &[Scenario]) -> PrepNeeds {
    let mut needs = PrepNeeds {
        decompose: false,
        corrupt: false,
        direct: false,
        plausible: false,
    };
    for scenario in scenarios {
        match scenario {
            Scenario::Intra(kind) => {
                needs.decompose = true;
                if kind.family == InterventionFamily::CorruptOption {
                    needs.corrupt = true;
                }
            }
            Scenario::Dta { edit, .. } => match edit {
                EditKind::DirectAlternating => needs.direct = true,
                EditKind::PlausibleAlternating => {
                    needs.plausible = true;
                    needs.decompose = true;
                }
            },
        }
    }
    needs
}

async fn prepare_draft(
    item: Arc<McqItem>,
    mut draft: ThinkingDraft,
    annotator: &Gateway,
    judge: &Gateway,
    needs: &PrepNeeds,
    seed: u64,
    policy: crate::interventions::WrongChoicePolicy,
) -> DraftContext {
    let mut requests = Vec::new();
    let mut notes = Vec::new();
    let mut decomposition_error = None;
    let mut plan = None;

    if needs.decompose {
        match build_decomposition_prompt(&draft.raw_text) {
            Ok(prompt) => match annotator.call_annotator(&prompt).await {
                Ok(generation) => {
                    requests.push(generation.key.clone());
                    match parse_decomposed_trace(&generation.text) {
                        Ok(steps) => {
                            draft.steps = steps;
                            match partition_blocks(&draft.steps).and_then(|b| plan_insertions(&b))
                            {
                                Ok(p) => plan = Some(p),
                                Err(e) => decomposition_error = Some(e.to_string()),
                            }
                        }
                        Err(e) => decomposition_error = Some(e.to_string()),
                    }
                }
                Err(e) => decomposition_error = Some(e.to_string()),
            },
            Err(e) => decomposition_error = Some(e.to_string()),
        }
    }

    let original = match extract_conclusion(judge, &item, &draft.raw_text).await {
        Ok((label, key)) => {
            if let Some(key) = key {
                requests.push(key);
            }
            label
        }
        Err(e) => {
            notes.push(format!("conclusion extraction failed: {e}"));
            None
        }
    };
    draft.conclusion = original;
    if original.is_none() {
        notes.push("original draft conclusion unextractable".into());
    }

    let wrong = choose_wrong_choice(&item, original, seed, policy)
        .expect("answer space validated at load");

    let mut corrupt = None;
    let mut corrupt_error = None;
    if needs.corrupt {
        let target_label = original.unwrap_or(item.gold);
        if original.is_none() {
            notes.push("corrupt target fell back to the gold label".into());
        }
        match build_corrupt_prompt(&item, target_label) {
            Ok(prompt) => match annotator.call_annotator(&prompt).await {
                Ok(generation) => {
                    requests.push(generation.key.clone());
                    match parse_corrupt_response(&generation.text) {
                        Ok((perturbed_option, explanation)) => {
                            corrupt = Some(CorruptMeta {
                                perturbed_option,
                                explanation,
                                target: target_label,
                            });
                        }
                        Err(e) => corrupt_error = Some(e.to_string()),
                    }
                }
                Err(e) => corrupt_error = Some(e.to_string()),
            },
            Err(e) => corrupt_error = Some(e.to_string()),
        }
    }

    let direct = needs.direct.then(|| make_direct_edit(&draft, wrong));

    let mut plausible = None;
    let mut plausible_error = None;
    if needs.plausible {
        let last_step = draft
            .steps
            .last()
            .map(|s| s.text.clone())
            .unwrap_or_else(|| draft.raw_text.trim().to_string());
        let prompt = build_plausible_prompt(&item, &last_step, wrong);
        match annotator.call_annotator(&prompt).await {
            Ok(generation) => {
                requests.push(generation.key.clone());
                match make_plausible_edit(&draft, wrong, &generation.text) {
                    Ok(edit) => plausible = Some(edit),
                    Err(e) => plausible_error = Some(e.to_string()),
                }
            }
            Err(e) => plausible_error = Some(e.to_string()),
        }
    }

    DraftContext {
        item,
        draft,
        plan,
        decomposition_error,
        original,
        corrupt,
        corrupt_error,
        wrong,
        direct,
        plausible,
        plausible_error,
        prep_requests: requests,
        prep_notes: notes,
    }
}

fn base_record(
    ctx: &DraftContext,
    model: &str,
    dataset: &str,
    trial: TrialKind,
) -> EvaluationRecord {
    EvaluationRecord {
        trial_id: trial_id(
            &ctx.item.id,
            &ctx.draft.source_model,
            model,
            &trial.id(),
        ),
        item_id: ctx.item.id.clone(),
        dataset: dataset.to_string(),
        draft_source: ctx.draft.source_model.clone(),
        model: model.to_string(),
        trial,
        n_choices: ctx.item.n(),
        original_conclusion: ctx.original,
        wrong_choice: None,
        insert_position: None,
        phi: None,
        verdict: None,
        answers: Answers::default(),
        scores: Scores::default(),
        flags: Default::default(),
        notes: ctx.prep_notes.clone(),
        requests: ctx.prep_requests.clone(),
    }
}

enum Classification {
    Verdict(JudgeVerdict),
    Unjudgeable(String),
    Failed(String),
}

/// One judge call plus a single format-repair re-ask; format failure after
/// the re-ask marks the trial unjudgeable.
async fn classify_with_retry(
    judge: &Gateway,
    prompt: &str,
    n: usize,
    keys: &mut Vec<String>,
) -> Classification {
    let generation = match judge.call_judge(prompt).await {
        Ok(g) => g,
        Err(e) => return Classification::Failed(e.to_string()),
    };
    keys.push(generation.key.clone());
    match parse_verdict(&generation.text, n) {
        Ok(verdict) => Classification::Verdict(verdict),
        Err(_) => {
            let retry_prompt = format!("{prompt}\n\nReturn ONLY the JSON object.");
            let generation = match judge.call_judge(&retry_prompt).await {
                Ok(g) => g,
                Err(e) => return Classification::Failed(e.to_string()),
            };
            keys.push(generation.key.clone());
            match parse_verdict(&generation.text, n) {
                Ok(verdict) => Classification::Verdict(verdict),
                Err(e) => Classification::Unjudgeable(e.to_string()),
            }
        }
    }
}

async fn run_intra_unit(
    target: &Gateway,
    judge: &Gateway,
    ctx: &DraftContext,
    kind: IntraKind,
    dataset: &str,
) -> EvaluationRecord {
    let mut record = base_record(
        ctx,
        target.model_name(),
        dataset,
        TrialKind::Intra { kind },
    );

    if let Some(error) = &ctx.decomposition_error {
        record.flags.insert(Flag::Skipped);
        record.notes.push(format!("decomposition failed: {error}"));
        return record;
    }
    let plan = ctx.plan.expect("plan present when decomposition succeeded");
    let position = plan.position(kind.location);
    record.insert_position = Some(position);

    let (injected, phi, corrupt_meta) = match kind.family {
        InterventionFamily::ShiftMapping => {
            match make_shift_step(&ctx.item, kind.variant) {
                Ok((text, phi)) => (text, phi, None),
                Err(e) => {
                    record.flags.insert(Flag::Skipped);
                    record.notes.push(format!("shift construction failed: {e}"));
                    return record;
                }
            }
        }
        InterventionFamily::CorruptOption => {
            let Some(meta) = &ctx.corrupt else {
                record.flags.insert(Flag::Skipped);
                record.notes.push(format!(
                    "corrupt generation unavailable: {}",
                    ctx.corrupt_error.as_deref().unwrap_or("not requested")
                ));
                return record;
            };
            match make_corrupt_step(&ctx.item, &meta.perturbed_option, meta.target, kind.variant)
            {
                Ok((_, true)) => {
                    record.flags.insert(Flag::Skipped);
                    record
                        .notes
                        .push("vacuous corruption: perturbed option equals original".into());
                    return record;
                }
                Ok((text, false)) => (
                    text,
                    crate::model::ConclusionMap::Complement,
                    Some(meta.clone()),
                ),
                Err(e) => {
                    record.flags.insert(Flag::Skipped);
                    record.notes.push(format!("corrupt construction failed: {e}"));
                    return record;
                }
            }
        }
    };
    record.phi = Some(phi);

    let prefix = match splice(&ctx.draft, position, &injected) {
        Ok(p) => p,
        Err(e) => {
            record.flags.insert(Flag::Skipped);
            record.notes.push(format!("splice failed: {e}"));
            return record;
        }
    };

    let continuation = match target.continue_draft(&ctx.item, &prefix).await {
        Ok(generation) => {
            record.requests.push(generation.key.clone());
            if generation.truncated {
                record.flags.insert(Flag::Truncated);
            }
            generation
        }
        Err(e) => {
            record.flags.insert(Flag::RetryableFailure);
            record.notes.push(e.to_string());
            return record;
        }
    };

    let judge_prompt = match build_judge_prompt(
        kind,
        &ctx.item,
        &injected,
        &continuation.text,
        corrupt_meta.as_ref(),
    ) {
        Ok(p) => p,
        Err(e) => {
            record.flags.insert(Flag::Skipped);
            record.notes.push(format!("judge prompt construction failed: {e}"));
            return record;
        }
    };

    match classify_with_retry(judge, &judge_prompt, ctx.item.n(), &mut record.requests).await {
        Classification::Verdict(verdict) => {
            record.answers.continuation_conclusion = verdict.final_answer;
            if verdict.final_answer.is_none() {
                record.flags.insert(Flag::NullAnswer);
            }
            record.verdict = Some(verdict);
        }
        Classification::Unjudgeable(note) => {
            record.flags.insert(Flag::Unjudgeable);
            record.notes.push(format!("unjudgeable: {note}"));
        }
        Classification::Failed(note) => {
            record.flags.insert(Flag::RetryableFailure);
            record.notes.push(note);
        }
    }

    record.scores.intra = score_record_intra(&record);
    record
}

#[derive(Default)]
struct ModeOutcome {
    requests: Vec<String>,
    truncated: bool,
    failure: Option<String>,
    null_answer: bool,
}

async fn run_dta_unit(
    target: &Gateway,
    judge: &Gateway,
    ctx: &DraftContext,
    edit_kind: EditKind,
    modes: &[AnswerMode],
    dataset: &str,
) -> Vec<EvaluationRecord> {
    let edit = match edit_kind {
        EditKind::DirectAlternating => ctx.direct.as_ref(),
        EditKind::PlausibleAlternating => ctx.plausible.as_ref(),
    };

    let mut answers = Answers::default();
    let mut outcomes: BTreeMap<AnswerMode, ModeOutcome> = BTreeMap::new();

    if let Some(edit) = edit {
        let modified_text = edit.modified_draft.raw_text.clone();
        for mode in modes {
            let mut outcome = ModeOutcome::default();
            match mode {
                AnswerMode::Standard => {
                    match target.answer_standard(&ctx.item, &modified_text).await {
                        Ok((result, generation)) => {
                            outcome.requests.push(generation.key.clone());
                            outcome.truncated = generation.truncated;
                            if result.explanation.trim().is_empty() {
                                outcome.null_answer = true;
                            } else {
                                match extract_conclusion(judge, &ctx.item, &result.explanation)
                                    .await
                                {
                                    Ok((label, key)) => {
                                        if let Some(key) = key {
                                            outcome.requests.push(key);
                                        }
                                        answers.standard = label;
                                        outcome.null_answer = label.is_none();
                                    }
                                    Err(e) => {
                                        outcome.failure = Some(format!(
                                            "answer extraction failed: {e}"
                                        ));
                                        outcome.null_answer = true;
                                    }
                                }
                            }
                        }
                        Err(e) => outcome.failure = Some(e.to_string()),
                    }
                }
                AnswerMode::Immediate => {
                    match target.answer_immediate(&ctx.item, &modified_text).await {
                        Ok((result, generation)) => {
                            outcome.requests.push(generation.key.clone());
                            outcome.truncated = generation.truncated;
                            answers.immediate = result.final_answer;
                            outcome.null_answer = result.final_answer.is_none();
                        }
                        Err(e) => outcome.failure = Some(e.to_string()),
                    }
                }
            }
            outcomes.insert(*mode, outcome);
        }
    }

    let wrong = edit.map_or(ctx.wrong, |e| e.wrong_choice);
    let mut records = Vec::new();
    for mode in modes {
        let mut record = base_record(
            ctx,
            target.model_name(),
            dataset,
            TrialKind::DraftToAnswer {
                edit: edit_kind,
                mode: *mode,
            },
        );
        record.wrong_choice = Some(wrong);
        record.answers = answers.clone();

        if edit.is_none() {
            record.flags.insert(Flag::Skipped);
            record.notes.push(format!(
                "edit unavailable: {}",
                ctx.plausible_error.as_deref().unwrap_or("not constructed")
            ));
            records.push(record);
            continue;
        }

        if let Some(outcome) = outcomes.get(mode) {
            record.requests.extend(outcome.requests.iter().cloned());
            if outcome.truncated {
                record.flags.insert(Flag::Truncated);
            }
            if let Some(failure) = &outcome.failure {
                record.flags.insert(Flag::RetryableFailure);
                record.notes.push(failure.clone());
            } else if outcome.null_answer {
                record.flags.insert(Flag::NullAnswer);
            }
        }

        let own_answer = match mode {
            AnswerMode::Standard => answers.standard,
            AnswerMode::Immediate => answers.immediate,
        };
        if !record.flags.contains(&Flag::Skipped)
            && !record.flags.contains(&Flag::RetryableFailure)
        {
            record.scores.consistency = score_consistency(own_answer, wrong);
            if *mode == AnswerMode::Standard {
                record.scores.reliance = score_reliance(answers.standard, answers.immediate);
            }
        }
        records.push(record);
    }
    records
}

fn read_records(path: &std::path::Path) -> Result<Vec<EvaluationRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvaluationRecord = serde_json::from_str(line)
            .map_err(|e| Error::load(path.display().to_string(), lineno + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Execute a full run: every selected scenario for every (item, draft,
/// target), resumable through the record file, reports rendered at the
/// end.
pub async fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let scenarios = Scenario::parse_selection(&config.scenarios)?;
    let dataset_label = config.dataset_label();

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(config.output_dir.display().to_string(), e))?;
    let cache = DiskCache::open(config.output_dir.join("cache"))?;
    let transcript = Arc::new(TranscriptWriter::create(
        &config.output_dir.join("transcript.jsonl"),
    )?);

    let (items, mut warnings) = load_mcq_dataset(&config.dataset, config.strict_dataset)?;
    let items: Vec<Arc<McqItem>> = items.into_iter().map(Arc::new).collect();

    let (targets, annotator, judge) = build_gateways(config, &cache, &transcript)?;

    let records_path = config.output_dir.join("records.jsonl");
    let existing = read_records(&records_path)?;
    if !existing.is_empty() && !config.resume {
        return Err(Error::Config(format!(
            "{} already holds {} records; pass --resume or use a fresh output dir",
            records_path.display(),
            existing.len()
        )));
    }
    let existing_ids: HashSet<String> =
        existing.iter().map(|r| r.trial_id.clone()).collect();

    let entries = gather_drafts(config, &items, &targets, &mut warnings).await?;

    // Group the per-draft work: intra kinds stay single units, the
    // draft-to-answer modes of one edit run together so reliance can
    // compare them.
    let selected_intra: Vec<IntraKind> = scenarios
        .iter()
        .filter_map(|s| match s {
            Scenario::Intra(kind) => Some(*kind),
            _ => None,
        })
        .collect();
    let mut dta_modes: BTreeMap<EditKind, Vec<AnswerMode>> = BTreeMap::new();
    for scenario in &scenarios {
        if let Scenario::Dta { edit, mode } = scenario {
            dta_modes.entry(*edit).or_default().push(*mode);
        }
    }

    let mut pending: Vec<TrialUnit> = Vec::new();
    for entry in &entries {
        for target in &entry.targets {
            let mut works: Vec<UnitWork> = selected_intra
                .iter()
                .map(|kind| UnitWork::Intra(*kind))
                .collect();
            for (edit, modes) in &dta_modes {
                works.push(UnitWork::Dta {
                    edit: *edit,
                    modes: modes.clone(),
                });
            }
            for work in works {
                let ids = unit_record_ids(entry, target, &work);
                if ids.iter().all(|id| existing_ids.contains(id)) {
                    continue;
                }
                pending.push(TrialUnit {
                    target: target.clone(),
                    draft_key: (entry.item.id.clone(), entry.draft.source_model.clone()),
                    work,
                });
            }
        }
    }
    if config.max_trials > 0 && pending.len() > config.max_trials {
        pending.truncate(config.max_trials);
    }

    // Prepare each draft that still has pending work.
    let needs = prep_needs(&scenarios);
    let pending_keys: HashSet<(String, String)> =
        pending.iter().map(|u| u.draft_key.clone()).collect();
    let prep_inputs: Vec<&DraftEntry> = entries
        .iter()
        .filter(|e| {
            pending_keys.contains(&(e.item.id.clone(), e.draft.source_model.clone()))
        })
        .collect();
    let contexts: BTreeMap<(String, String), Arc<DraftContext>> = futures::stream::iter(
        prep_inputs.into_iter().map(|entry| {
            let annotator = annotator.clone();
            let judge = judge.clone();
            let item = entry.item.clone();
            let draft = entry.draft.clone();
            let needs = &needs;
            let policy = config.wrong_choice_policy;
            let seed = config.seed;
            async move {
                let key = (item.id.clone(), draft.source_model.clone());
                let ctx =
                    prepare_draft(item, draft, &annotator, &judge, needs, seed, policy).await;
                (key, Arc::new(ctx))
            }
        }),
    )
    .buffer_unordered(PREP_PARALLELISM)
    .collect::<Vec<_>>()
    .await
    .into_iter()
    .collect();

    // Single serialized record writer; duplicates (possible when resuming
    // a partially written draft-to-answer unit) are dropped here.
    let (sender, mut receiver) = tokio::sync::mpsc::unbounded_channel::<EvaluationRecord>();
    let writer_path = records_path.clone();
    let mut known_ids = existing_ids.clone();
    let writer = tokio::spawn(async move {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&writer_path)
            .map_err(|e| Error::io(writer_path.display().to_string(), e))?;
        let mut written = 0u64;
        while let Some(record) = receiver.recv().await {
            if !known_ids.insert(record.trial_id.clone()) {
                continue;
            }
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(writer_path.display().to_string(), e))?;
            written += 1;
        }
        Ok::<u64, Error>(written)
    });

    let dataset_for_units = dataset_label.clone();
    futures::stream::iter(pending.into_iter().map(|unit| {
        let judge = judge.clone();
        let contexts = &contexts;
        let sender = sender.clone();
        let dataset = dataset_for_units.clone();
        async move {
            let ctx = contexts
                .get(&unit.draft_key)
                .expect("context prepared for every pending unit")
                .clone();
            let records = match &unit.work {
                UnitWork::Intra(kind) => {
                    vec![run_intra_unit(&unit.target, &judge, &ctx, *kind, &dataset).await]
                }
                UnitWork::Dta { edit, modes } => {
                    run_dta_unit(&unit.target, &judge, &ctx, *edit, modes, &dataset).await
                }
            };
            for record in records {
                let _ = sender.send(record);
            }
        }
    }))
    .buffer_unordered(UNIT_PARALLELISM)
    .collect::<Vec<()>>()
    .await;
    drop(sender);
    writer
        .await
        .map_err(|e| Error::Config(format!("writer task panicked: {e}")))??;

    // Report from the full persisted record set, canonically ordered.
    let mut all_records = read_records(&records_path)?;
    all_records.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    let flagged_records = all_records.iter().filter(|r| !r.flags.is_empty()).count() as u64;
    let report = build_report(all_records, &dataset_label, &config.semantic_digest());
    let report_dir = config.output_dir.join("report");
    render_report(&report, &report_dir, &ReportFormat::ALL)?;

    let stats: BTreeMap<String, StatsSnapshot> = targets
        .iter()
        .map(|t| (format!("target:{}", t.model_name()), t.stats()))
        .chain([
            (format!("annotator:{}", annotator.model_name()), annotator.stats()),
            (format!("judge:{}", judge.model_name()), judge.stats()),
        ])
        .collect();
    let meta = json!({
        "warnings": warnings,
        "gateway_stats": stats,
        "records": report.diagnostics.total_records,
        "flagged_records": flagged_records,
        "items": items.len(),
        "scenarios": scenarios.len(),
    });
    let meta_path = config.output_dir.join("run_meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta"))
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    for warning in &warnings {
        eprintln!("warning: {warning}");
    }

    Ok(RunOutcome {
        report,
        flagged_records,
        report_dir,
    })
}

/// Decompose every draft and write the labeled steps, without running any
/// interventions.
pub async fn decompose_only(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(config.output_dir.display().to_string(), e))?;
    let cache = DiskCache::open(config.output_dir.join("cache"))?;
    let transcript = Arc::new(TranscriptWriter::create(
        &config.output_dir.join("transcript.jsonl"),
    )?);
    let (items, mut warnings) = load_mcq_dataset(&config.dataset, config.strict_dataset)?;
    let items: Vec<Arc<McqItem>> = items.into_iter().map(Arc::new).collect();
    let (targets, annotator, _) = build_gateways(config, &cache, &transcript)?;
    let entries = gather_drafts(config, &items, &targets, &mut warnings).await?;

    let mut lines = String::new();
    for entry in &entries {
        let prompt = build_decomposition_prompt(&entry.draft.raw_text)?;
        let line = match annotator.call_annotator(&prompt).await {
            Ok(generation) => match parse_decomposed_trace(&generation.text) {
                Ok(steps) => json!({
                    "item_id": entry.item.id,
                    "model": entry.draft.source_model,
                    "steps": steps,
                }),
                Err(e) => json!({
                    "item_id": entry.item.id,
                    "model": entry.draft.source_model,
                    "error": e.to_string(),
                }),
            },
            Err(e) => json!({
                "item_id": entry.item.id,
                "model": entry.draft.source_model,
                "error": e.to_string(),
            }),
        };
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    let out_path = config.output_dir.join("decompositions.jsonl");
    std::fs::write(&out_path, lines).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    Ok(out_path)
}

/// Dry run: construct and emit every selected intervention text without
/// calling any target model.
pub async fn intervene_only(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let scenarios = Scenario::parse_selection(&config.scenarios)?;
    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(config.output_dir.display().to_string(), e))?;
    let cache = DiskCache::open(config.output_dir.join("cache"))?;
    let transcript = Arc::new(TranscriptWriter::create(
        &config.output_dir.join("transcript.jsonl"),
    )?);
    let (items, mut warnings) = load_mcq_dataset(&config.dataset, config.strict_dataset)?;
    let items: Vec<Arc<McqItem>> = items.into_iter().map(Arc::new).collect();
    let (targets, annotator, judge) = build_gateways(config, &cache, &transcript)?;
    let entries = gather_drafts(config, &items, &targets, &mut warnings).await?;
    let needs = prep_needs(&scenarios);

    let mut lines = String::new();
    for entry in &entries {
        let ctx = prepare_draft(
            entry.item.clone(),
            entry.draft.clone(),
            &annotator,
            &judge,
            &needs,
            config.seed,
            config.wrong_choice_policy,
        )
        .await;
        for scenario in &scenarios {
            let line = match scenario {
                Scenario::Intra(kind) => intra_dry_run_line(&ctx, *kind),
                Scenario::Dta { edit, mode } => {
                    if *mode == AnswerMode::Immediate {
                        continue; // the edit text is mode-independent
                    }
                    let edit_obj = match edit {
                        EditKind::DirectAlternating => ctx.direct.as_ref(),
                        EditKind::PlausibleAlternating => ctx.plausible.as_ref(),
                    };
                    match edit_obj {
                        Some(e) => json!({
                            "item_id": ctx.item.id,
                            "model": ctx.draft.source_model,
                            "edit": edit.as_str(),
                            "wrong_choice": e.wrong_choice.display().to_string(),
                            "injected_text": e.injected_text,
                        }),
                        None => json!({
                            "item_id": ctx.item.id,
                            "model": ctx.draft.source_model,
                            "edit": edit.as_str(),
                            "error": ctx.plausible_error.clone().unwrap_or_else(|| "unavailable".into()),
                        }),
                    }
                }
            };
            lines.push_str(&line.to_string());
            lines.push('\n');
        }
    }
    let out_path = config.output_dir.join("interventions.jsonl");
    std::fs::write(&out_path, lines).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    Ok(out_path)
}

fn intra_dry_run_line(ctx: &DraftContext, kind: IntraKind) -> serde_json::Value {
    if let Some(error) = &ctx.decomposition_error {
        return json!({
            "item_id": ctx.item.id,
            "model": ctx.draft.source_model,
            "scenario": kind.id(),
            "error": format!("decomposition failed: {error}"),
        });
    }
    let position = ctx.plan.expect("plan").position(kind.location);
    let built = match kind.family {
        InterventionFamily::ShiftMapping => {
            make_shift_step(&ctx.item, kind.variant).map(|(text, _)| text)
        }
        InterventionFamily::CorruptOption => match &ctx.corrupt {
            Some(meta) => {
                make_corrupt_step(&ctx.item, &meta.perturbed_option, meta.target, kind.variant)
                    .map(|(text, _)| text)
            }
            None => Err(Error::AnnotatorFormat(
                ctx.corrupt_error.clone().unwrap_or_else(|| "unavailable".into()),
            )),
        },
    };
    match built {
        Ok(text) => json!({
            "item_id": ctx.item.id,
            "model": ctx.draft.source_model,
            "scenario": kind.id(),
            "insert_position": position,
            "injected_text": text,
        }),
        Err(e) => json!({
            "item_id": ctx.item.id,
            "model": ctx.draft.source_model,
            "scenario": kind.id(),
            "error": e.to_string(),
        }),
    }
}

/// Re-render the report from already-persisted records.
pub fn report_only(config: &RunConfig) -> Result<PathBuf> {
    let records_path = config.output_dir.join("records.jsonl");
    let mut records = read_records(&records_path)?;
    if records.is_empty() {
        return Err(Error::Config(format!(
            "no records at {}",
            records_path.display()
        )));
    }
    records.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    let report = build_report(records, &config.dataset_label(), &config.semantic_digest());
    let report_dir = config.output_dir.join("report");
    render_report(&report, &report_dir, &ReportFormat::ALL)?;
    Ok(report_dir)
}
