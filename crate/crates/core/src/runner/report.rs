//! Report assembly and rendering: markdown tables mirroring the paper's
//! layouts, per-cell CSVs, and the canonical sorted record file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::InsertLocation;
use crate::error::{Error, Result};
use crate::interventions::{EditKind, InterventionFamily};
use crate::metrics::{
    aggregate, diagnostics, AggregateCell, Diagnostics, EvaluationRecord, GroupKey, Grouping,
    JudgmentBucket,
};
use crate::model::{AnswerMode, StepKind};

/// Digest over the checked-in prompt templates, pinned into report
/// provenance so regenerated reports are traceable to exact prompt bytes.
pub fn template_digest() -> String {
    const TEMPLATES: [&str; 8] = [
        include_str!("../../templates/decompose.txt"),
        include_str!("../../templates/corrupt_prompt.txt"),
        include_str!("../../templates/judge_shift_continue.txt"),
        include_str!("../../templates/judge_shift_backtrack.txt"),
        include_str!("../../templates/judge_corrupt_continue.txt"),
        include_str!("../../templates/judge_corrupt_backtrack.txt"),
        include_str!("../../templates/plausible_prompt.txt"),
        include_str!("../../templates/extract_answer.txt"),
    ];
    let mut hasher = Sha256::new();
    for template in TEMPLATES {
        hasher.update(template.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub template_digest: String,
}

/// Location-mean summary row: the unweighted mean of the three per-location
/// rates, with pooled counts alongside for the alternative reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationMeanCell {
    pub key: GroupKey,
    pub rate_mean: f64,
    pub locations: usize,
    pub pooled_numerator: u64,
    pub pooled_denominator: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset_label: String,
    pub intra_by_location: Vec<AggregateCell>,
    pub intra_pooled: Vec<AggregateCell>,
    pub intra_location_mean: Vec<LocationMeanCell>,
    pub reliance: Vec<AggregateCell>,
    pub consistency: Vec<AggregateCell>,
    pub behavior: Vec<AggregateCell>,
    pub diagnostics: Diagnostics,
    pub provenance: Provenance,
    pub records: Vec<EvaluationRecord>,
}

/// The paper-order intra table columns.
const INTRA_COLUMNS: [(InterventionFamily, StepKind, &str); 4] = [
    (InterventionFamily::ShiftMapping, StepKind::Continue, "Shift (Cont)"),
    (InterventionFamily::CorruptOption, StepKind::Continue, "Corrupt (Cont)"),
    (InterventionFamily::ShiftMapping, StepKind::Backtrack, "Shift (Back)"),
    (InterventionFamily::CorruptOption, StepKind::Backtrack, "Corrupt (Back)"),
];

const DTA_COLUMNS: [(EditKind, AnswerMode, &str); 4] = [
    (EditKind::DirectAlternating, AnswerMode::Standard, "Direct"),
    (EditKind::DirectAlternating, AnswerMode::Immediate, "Direct (IM)"),
    (EditKind::PlausibleAlternating, AnswerMode::Standard, "Plausible"),
    (EditKind::PlausibleAlternating, AnswerMode::Immediate, "Plausible (IM)"),
];

fn variant_str(kind: StepKind) -> &'static str {
    match kind {
        StepKind::Continue => "continue",
        StepKind::Backtrack => "backtrack",
    }
}

/// Build the full report from scored records. Records are expected sorted
/// by trial id (the caller canonicalizes).
pub fn build_report(
    records: Vec<EvaluationRecord>,
    dataset_label: &str,
    config_digest: &str,
) -> RunReport {
    let intra_by_location = aggregate(&records, Grouping::IntraByLocation);
    let intra_pooled = aggregate(&records, Grouping::IntraPooled);
    let intra_location_mean = location_means(&intra_by_location, &intra_pooled);
    RunReport {
        dataset_label: dataset_label.to_string(),
        reliance: aggregate(&records, Grouping::RelianceByEdit),
        consistency: aggregate(&records, Grouping::ConsistencyByEditMode),
        behavior: aggregate(&records, Grouping::BehaviorComposition),
        diagnostics: diagnostics(&records),
        provenance: Provenance {
            config_digest: config_digest.to_string(),
            template_digest: template_digest(),
        },
        intra_by_location,
        intra_pooled,
        intra_location_mean,
        records,
    }
}

fn location_means(
    by_location: &[AggregateCell],
    pooled: &[AggregateCell],
) -> Vec<LocationMeanCell> {
    let mut grouped: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for cell in by_location {
        let mut key = cell.key.clone();
        key.location = None;
        grouped.entry(key).or_default().push(cell.rate);
    }
    grouped
        .into_iter()
        .map(|(key, rates)| {
            let pooled_cell = pooled.iter().find(|c| c.key == key);
            LocationMeanCell {
                rate_mean: rates.iter().sum::<f64>() / rates.len() as f64,
                locations: rates.len(),
                pooled_numerator: pooled_cell.map_or(0, |c| c.numerator),
                pooled_denominator: pooled_cell.map_or(0, |c| c.denominator),
                key,
            }
        })
        .collect()
}

fn fmt_rate(rate: f64) -> String {
    format!("{rate:.2}")
}

fn fmt_cell(rate: Option<f64>) -> String {
    rate.map_or_else(|| "—".to_string(), fmt_rate)
}

fn row_average(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// (dataset, draft_source) section keys present in a cell list.
fn sections<'a, I: Iterator<Item = &'a GroupKey>>(keys: I) -> BTreeSet<(String, String)> {
    keys.map(|k| (k.dataset.clone(), k.draft_source.clone()))
        .collect()
}

fn models_in<'a, I: Iterator<Item = &'a GroupKey>>(keys: I) -> BTreeSet<String> {
    keys.map(|k| k.model.clone()).collect()
}

pub fn render_markdown(report: &RunReport) -> String {
    let mut out = String::new();
    let mut omitted: Vec<&str> = Vec::new();
    out.push_str("# Thinking-draft faithfulness report\n\n");
    out.push_str(&format!("- Dataset: {}\n", report.dataset_label));
    out.push_str(&format!("- Records: {}\n", report.diagnostics.total_records));
    out.push_str(&format!("- Config digest: `{}`\n", report.provenance.config_digest));
    out.push_str(&format!(
        "- Template digest: `{}`\n\n",
        report.provenance.template_digest
    ));

    // Intra tables: location mean with pooled variant below.
    if report.intra_location_mean.is_empty() {
        omitted.push("intra-draft faithful rate");
    } else {
        out.push_str("## Intra-draft faithful rate (%), mean over insertion locations\n\n");
        render_intra_mean_tables(&mut out, report);
        out.push_str("## Intra-draft faithful rate (%), pooled over locations\n\n");
        render_intra_pooled_tables(&mut out, report);
    }

    if report.reliance.is_empty() {
        omitted.push("draft reliance rate");
    } else {
        out.push_str("## Draft reliance rate (%)\n\n");
        render_reliance_tables(&mut out, report);
    }

    if report.consistency.is_empty() {
        omitted.push("draft-answer consistency rate");
    } else {
        out.push_str("## Draft-answer consistency rate (%)\n\n");
        render_consistency_tables(&mut out, report);
    }

    if report.behavior.is_empty() {
        omitted.push("behavior composition");
    } else {
        out.push_str("## Behavior composition (%)\n\n");
        render_behavior_tables(&mut out, report);
    }

    out.push_str("## Diagnostics\n\n");
    let d = &report.diagnostics;
    out.push_str(&format!("- total records: {}\n", d.total_records));
    out.push_str(&format!("- skipped: {}\n", d.skipped));
    out.push_str(&format!("- truncated: {}\n", d.truncated));
    out.push_str(&format!("- unjudgeable: {}\n", d.unjudgeable));
    out.push_str(&format!("- null answers: {}\n", d.null_answer));
    out.push_str(&format!("- retry failures: {}\n", d.retryable_failure));
    out.push_str(&format!("- unscoreable intra trials: {}\n", d.unscoreable_intra));
    out.push_str(&format!("- unscoreable reliance trials: {}\n", d.unscoreable_reliance));
    out.push_str(&format!(
        "- unscoreable consistency trials: {}\n",
        d.unscoreable_consistency
    ));
    for table in omitted {
        out.push_str(&format!("- table omitted (no scoreable records): {table}\n"));
    }
    out
}

fn render_intra_mean_tables(out: &mut String, report: &RunReport) {
    let cells = &report.intra_location_mean;
    for (dataset, source) in sections(cells.iter().map(|c| &c.key)) {
        out.push_str(&format!("### {dataset} — draft source: {source}\n\n"));
        out.push_str("| Model | Shift (Cont) | Corrupt (Cont) | Shift (Back) | Corrupt (Back) | Avg |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for model in models_in(cells.iter().map(|c| &c.key)) {
            let mut values = Vec::new();
            for (family, variant, _) in INTRA_COLUMNS {
                let rate = cells
                    .iter()
                    .find(|c| {
                        c.key.model == model
                            && c.key.dataset == dataset
                            && c.key.draft_source == source
                            && c.key.family == Some(family)
                            && c.key.variant == Some(variant)
                    })
                    .map(|c| c.rate_mean);
                values.push(rate);
            }
            if values.iter().all(Option::is_none) {
                continue;
            }
            out.push_str(&format!(
                "| {model} | {} | {} | {} | {} | {} |\n",
                fmt_cell(values[0]),
                fmt_cell(values[1]),
                fmt_cell(values[2]),
                fmt_cell(values[3]),
                fmt_cell(row_average(&values)),
            ));
        }
        out.push('\n');
    }
    render_combined_sources(out, report);
}

/// Equal-weight mean across draft sources, emitted when a dataset has more
/// than one source.
fn render_combined_sources(out: &mut String, report: &RunReport) {
    let cells = &report.intra_location_mean;
    let datasets: BTreeSet<String> = cells.iter().map(|c| c.key.dataset.clone()).collect();
    for dataset in datasets {
        let sources: BTreeSet<String> = cells
            .iter()
            .filter(|c| c.key.dataset == dataset)
            .map(|c| c.key.draft_source.clone())
            .collect();
        if sources.len() < 2 {
            continue;
        }
        out.push_str(&format!(
            "### {dataset} — combined across {} draft sources (equal-weight mean)\n\n",
            sources.len()
        ));
        out.push_str("| Model | Shift (Cont) | Corrupt (Cont) | Shift (Back) | Corrupt (Back) | Avg |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for model in models_in(cells.iter().map(|c| &c.key)) {
            let mut values = Vec::new();
            for (family, variant, _) in INTRA_COLUMNS {
                let rates: Vec<f64> = cells
                    .iter()
                    .filter(|c| {
                        c.key.model == model
                            && c.key.dataset == dataset
                            && c.key.family == Some(family)
                            && c.key.variant == Some(variant)
                    })
                    .map(|c| c.rate_mean)
                    .collect();
                values.push(
                    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
                );
            }
            if values.iter().all(Option::is_none) {
                continue;
            }
            out.push_str(&format!(
                "| {model} | {} | {} | {} | {} | {} |\n",
                fmt_cell(values[0]),
                fmt_cell(values[1]),
                fmt_cell(values[2]),
                fmt_cell(values[3]),
                fmt_cell(row_average(&values)),
            ));
        }
        out.push('\n');
    }
}

fn render_intra_pooled_tables(out: &mut String, report: &RunReport) {
    let cells = &report.intra_pooled;
    for (dataset, source) in sections(cells.iter().map(|c| &c.key)) {
        out.push_str(&format!("### {dataset} — draft source: {source}\n\n"));
        out.push_str("| Model | Shift (Cont) | Corrupt (Cont) | Shift (Back) | Corrupt (Back) | Avg |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for model in models_in(cells.iter().map(|c| &c.key)) {
            let mut values = Vec::new();
            for (family, variant, _) in INTRA_COLUMNS {
                let rate = cells
                    .iter()
                    .find(|c| {
                        c.key.model == model
                            && c.key.dataset == dataset
                            && c.key.draft_source == source
                            && c.key.family == Some(family)
                            && c.key.variant == Some(variant)
                    })
                    .map(|c| c.rate);
                values.push(rate);
            }
            if values.iter().all(Option::is_none) {
                continue;
            }
            out.push_str(&format!(
                "| {model} | {} | {} | {} | {} | {} |\n",
                fmt_cell(values[0]),
                fmt_cell(values[1]),
                fmt_cell(values[2]),
                fmt_cell(values[3]),
                fmt_cell(row_average(&values)),
            ));
        }
        out.push('\n');
    }
}

fn render_reliance_tables(out: &mut String, report: &RunReport) {
    let cells = &report.reliance;
    for (dataset, source) in sections(cells.iter().map(|c| &c.key)) {
        out.push_str(&format!("### {dataset} — draft source: {source}\n\n"));
        out.push_str("| Model | Direct | Plausible | Avg |\n|---|---|---|---|\n");
        for model in models_in(cells.iter().map(|c| &c.key)) {
            let mut values = Vec::new();
            for edit in [EditKind::DirectAlternating, EditKind::PlausibleAlternating] {
                let rate = cells
                    .iter()
                    .find(|c| {
                        c.key.model == model
                            && c.key.dataset == dataset
                            && c.key.draft_source == source
                            && c.key.edit == Some(edit)
                    })
                    .map(|c| c.rate);
                values.push(rate);
            }
            if values.iter().all(Option::is_none) {
                continue;
            }
            out.push_str(&format!(
                "| {model} | {} | {} | {} |\n",
                fmt_cell(values[0]),
                fmt_cell(values[1]),
                fmt_cell(row_average(&values)),
            ));
        }
        out.push('\n');
    }
}

fn render_consistency_tables(out: &mut String, report: &RunReport) {
    let cells = &report.consistency;
    for (dataset, source) in sections(cells.iter().map(|c| &c.key)) {
        out.push_str(&format!("### {dataset} — draft source: {source}\n\n"));
        out.push_str(
            "| Model | Direct | Direct (IM) | Plausible | Plausible (IM) | Avg |\n|---|---|---|---|---|---|\n",
        );
        for model in models_in(cells.iter().map(|c| &c.key)) {
            let mut values = Vec::new();
            for (edit, mode, _) in DTA_COLUMNS {
                let rate = cells
                    .iter()
                    .find(|c| {
                        c.key.model == model
                            && c.key.dataset == dataset
                            && c.key.draft_source == source
                            && c.key.edit == Some(edit)
                            && c.key.mode == Some(mode)
                    })
                    .map(|c| c.rate);
                values.push(rate);
            }
            if values.iter().all(Option::is_none) {
                continue;
            }
            out.push_str(&format!(
                "| {model} | {} | {} | {} | {} | {} |\n",
                fmt_cell(values[0]),
                fmt_cell(values[1]),
                fmt_cell(values[2]),
                fmt_cell(values[3]),
                fmt_cell(row_average(&values)),
            ));
        }
        out.push('\n');
    }
}

fn render_behavior_tables(out: &mut String, report: &RunReport) {
    let cells = &report.behavior;
    for (dataset, source) in sections(cells.iter().map(|c| &c.key)) {
        out.push_str(&format!("### {dataset} — draft source: {source}\n\n"));
        out.push_str(
            "| Model | Intervention | Location | Corrected | Followed | Unjudgeable |\n|---|---|---|---|---|---|\n",
        );
        let mut groups: BTreeSet<(String, InterventionFamily, StepKind, InsertLocation)> =
            BTreeSet::new();
        for cell in cells.iter().filter(|c| {
            c.key.dataset == dataset && c.key.draft_source == source
        }) {
            groups.insert((
                cell.key.model.clone(),
                cell.key.family.expect("behavior key has family"),
                cell.key.variant.expect("behavior key has variant"),
                cell.key.location.expect("behavior key has location"),
            ));
        }
        for (model, family, variant, location) in groups {
            let share = |bucket: JudgmentBucket| {
                cells
                    .iter()
                    .find(|c| {
                        c.key.model == model
                            && c.key.dataset == dataset
                            && c.key.draft_source == source
                            && c.key.family == Some(family)
                            && c.key.variant == Some(variant)
                            && c.key.location == Some(location)
                            && c.key.judgment == Some(bucket)
                    })
                    .map_or(0.0, |c| c.rate)
            };
            out.push_str(&format!(
                "| {model} | {}-{} | {} | {} | {} | {} |\n",
                family.as_str(),
                variant_str(variant),
                location.as_str(),
                fmt_rate(share(JudgmentBucket::Corrected)),
                fmt_rate(share(JudgmentBucket::Followed)),
                fmt_rate(share(JudgmentBucket::Unjudgeable)),
            ));
        }
        out.push('\n');
    }
}

fn key_csv_fields(key: &GroupKey) -> [String; 9] {
    [
        key.model.clone(),
        key.dataset.clone(),
        key.draft_source.clone(),
        key.family.map_or_else(String::new, |f| f.as_str().into()),
        key.variant.map_or_else(String::new, |v| variant_str(v).into()),
        key.location.map_or_else(String::new, |l| l.as_str().into()),
        key.edit.map_or_else(String::new, |e| e.as_str().into()),
        key.mode.map_or_else(String::new, |m| m.to_string()),
        key.judgment.map_or_else(String::new, |j| j.as_str().into()),
    ]
}

fn write_cell_csv(path: &Path, cells: &[AggregateCell]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Config(format!("csv {}: {e}", path.display())))?;
    writer
        .write_record([
            "model",
            "dataset",
            "draft_source",
            "family",
            "variant",
            "location",
            "edit",
            "mode",
            "judgment",
            "numerator",
            "denominator",
            "rate",
        ])
        .and_then(|_| {
            for cell in cells {
                let mut row: Vec<String> = key_csv_fields(&cell.key).to_vec();
                row.push(cell.numerator.to_string());
                row.push(cell.denominator.to_string());
                row.push(fmt_rate(cell.rate));
                writer.write_record(&row)?;
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| Error::Config(format!("csv {}: {e}", path.display())))
}

fn write_location_mean_csv(path: &Path, cells: &[LocationMeanCell]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Config(format!("csv {}: {e}", path.display())))?;
    writer
        .write_record([
            "model",
            "dataset",
            "draft_source",
            "family",
            "variant",
            "rate_mean",
            "locations",
            "pooled_numerator",
            "pooled_denominator",
        ])
        .and_then(|_| {
            for cell in cells {
                let key = key_csv_fields(&cell.key);
                writer.write_record([
                    key[0].as_str(),
                    key[1].as_str(),
                    key[2].as_str(),
                    key[3].as_str(),
                    key[4].as_str(),
                    &fmt_rate(cell.rate_mean),
                    &cell.locations.to_string(),
                    &cell.pooled_numerator.to_string(),
                    &cell.pooled_denominator.to_string(),
                ])?;
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| Error::Config(format!("csv {}: {e}", path.display())))
}

/// Output formats for `render_report`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Records,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::Markdown,
        ReportFormat::Csv,
        ReportFormat::Records,
    ];
}

/// Write the report files into `dir`. Everything written here is
/// deterministic for a given record set.
pub fn render_report(report: &RunReport, dir: &Path, formats: &[ReportFormat]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for format in formats {
        match format {
            ReportFormat::Markdown => {
                let path = dir.join("report.md");
                std::fs::write(&path, render_markdown(report))
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            ReportFormat::Csv => {
                write_cell_csv(&dir.join("intra_by_location.csv"), &report.intra_by_location)?;
                write_cell_csv(&dir.join("intra_pooled.csv"), &report.intra_pooled)?;
                write_location_mean_csv(
                    &dir.join("intra_location_mean.csv"),
                    &report.intra_location_mean,
                )?;
                write_cell_csv(&dir.join("reliance.csv"), &report.reliance)?;
                write_cell_csv(&dir.join("consistency.csv"), &report.consistency)?;
                write_cell_csv(&dir.join("behavior_composition.csv"), &report.behavior)?;
            }
            ReportFormat::Records => {
                let path = dir.join("records.jsonl");
                let mut body = String::new();
                for record in &report.records {
                    body.push_str(&serde_json::to_string(record).expect("record serializes"));
                    body.push('\n');
                }
                std::fs::write(&path, body)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
    }
    Ok(())
}
