//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Expected values come from independent oracles implemented here (naive
//! substitution, brute-force enumeration, full-scan recomputation) or from
//! hand-computed mock-run tables; never from the code paths under test.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::json;

use draft_audit::decomposition::{
    decomposition_template, parse_decomposed_trace, partition_blocks, plan_insertions,
    serialize_steps, InsertLocation,
};
use draft_audit::gateway::{DiskCache, EndpointConfig, Gateway};
use draft_audit::interventions::{
    build_corrupt_prompt, build_plausible_prompt, make_corrupt_step, make_direct_edit,
    make_shift_step, CorruptMeta, EditKind, InterventionFamily, IntraKind,
};
use draft_audit::judge::{build_judge_prompt, Judgment};
use draft_audit::metrics::{
    aggregate, score_consistency, score_intra, score_reliance, AggregateCell, EvaluationRecord,
    Flag, GroupKey, Grouping, JudgmentBucket, TrialKind,
};
use draft_audit::model::{
    shift_permutation, AnswerMode, ChoiceLabel, ConclusionMap, McqItem, ReasoningStep, StepKind,
    ThinkingDraft,
};
use draft_audit::runner::{self, demo, RunConfig};

// ── shared helpers ────────────────────────────────────────────────────────

/// Independent slot substitution: plain sequential replace over the
/// checked-in fixture. Deliberately not the library's substituter.
fn naive_fill(template: &str, subs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (slot, value) in subs {
        out = out.replace(slot, value);
    }
    out
}

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

fn item4() -> McqItem {
    McqItem::new(
        "acc-1",
        "Which statement holds?",
        vec![
            "wavelength halves".into(),
            "x stays constant".into(),
            "yield doubles".into(),
            "zero net flux".into(),
        ],
        ChoiceLabel(0),
    )
    .unwrap()
}

struct XorShift(u64);

impl XorShift {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    fn below(&mut self, bound: usize) -> usize {
        (self.next() % bound as u64) as usize
    }
}

// ── criterion 1: template fidelity ────────────────────────────────────────

#[test]
fn criterion_1_template_fidelity() {
    let item = item4();
    let (w, x, y, z) = ("wavelength halves", "x stays constant", "yield doubles", "zero net flux");
    let question = "Which statement holds?";
    let choice_lines = format!("A) {w}\nB) {x}\nC) {y}\nD) {z}");

    // Annotator decomposition prompt.
    let built = draft_audit::decomposition::build_decomposition_prompt("TRACE BODY").unwrap();
    let expected = naive_fill(&fixture("decompose.txt"), &[("{reasoning_trace}", "TRACE BODY")]);
    assert_eq!(built, expected, "decomposition prompt");

    // Shift intervention steps.
    let subs = [("{choice A}", w), ("{choice B}", x), ("{choice C}", y), ("{choice D}", z)];
    let (built, _) = make_shift_step(&item, StepKind::Continue).unwrap();
    assert_eq!(built, naive_fill(&fixture("shift_continue.txt"), &subs), "shift continue");
    let (built, _) = make_shift_step(&item, StepKind::Backtrack).unwrap();
    assert_eq!(built, naive_fill(&fixture("shift_backtrack.txt"), &subs), "shift backtrack");

    // Corrupt intervention steps, target = A.
    let corrupt_subs = [
        ("{corrupted choice A}", "wavelength quarters"),
        ("{choice B}", x),
        ("{choice C}", y),
        ("{choice D}", z),
    ];
    let (built, _) =
        make_corrupt_step(&item, "wavelength quarters", ChoiceLabel(0), StepKind::Continue)
            .unwrap();
    assert_eq!(
        built,
        naive_fill(&fixture("corrupt_continue.txt"), &corrupt_subs),
        "corrupt continue"
    );
    let (built, _) =
        make_corrupt_step(&item, "wavelength quarters", ChoiceLabel(0), StepKind::Backtrack)
            .unwrap();
    assert_eq!(
        built,
        naive_fill(&fixture("corrupt_backtrack.txt"), &corrupt_subs),
        "corrupt backtrack"
    );

    // Corrupt generation prompt (0-based target index).
    let built = build_corrupt_prompt(&item, ChoiceLabel(0)).unwrap();
    let expected = naive_fill(
        &fixture("corrupt_prompt.txt"),
        &[
            ("{question}", question),
            ("{choices}", &choice_lines),
            ("{corrupt index}", "0"),
        ],
    );
    assert_eq!(built, expected, "corrupt prompt");

    // The four judge prompts.
    let judge_subs = [
        ("{choices A}", w),
        ("{choices B}", x),
        ("{choices C}", y),
        ("{choices D}", z),
        ("{perturbed_step}", "PERTURBED STEP"),
        ("{response}", "MODEL RESPONSE"),
    ];
    for (variant, fixture_name) in [
        (StepKind::Continue, "judge_shift_continue.txt"),
        (StepKind::Backtrack, "judge_shift_backtrack.txt"),
    ] {
        let kind = IntraKind {
            family: InterventionFamily::ShiftMapping,
            variant,
            location: InsertLocation::Middle,
        };
        let built =
            build_judge_prompt(kind, &item, "PERTURBED STEP", "MODEL RESPONSE", None).unwrap();
        assert_eq!(built, naive_fill(&fixture(fixture_name), &judge_subs), "{fixture_name}");
    }
    let meta = CorruptMeta {
        perturbed_option: "wavelength quarters".into(),
        explanation: "halving became quartering".into(),
        target: ChoiceLabel(0),
    };
    let corrupt_judge_subs = [
        ("{question}", question),
        ("{choices A}", w),
        ("{choices B}", x),
        ("{choices C}", y),
        ("{choices D}", z),
        ("{perturbed_step}", "PERTURBED STEP"),
        ("{perturbed_element}", "wavelength quarters"),
        ("{perturbed_step_explanation}", "halving became quartering"),
        ("{response}", "MODEL RESPONSE"),
    ];
    for (variant, fixture_name) in [
        (StepKind::Continue, "judge_corrupt_continue.txt"),
        (StepKind::Backtrack, "judge_corrupt_backtrack.txt"),
    ] {
        let kind = IntraKind {
            family: InterventionFamily::CorruptOption,
            variant,
            location: InsertLocation::End,
        };
        let built =
            build_judge_prompt(kind, &item, "PERTURBED STEP", "MODEL RESPONSE", Some(&meta))
                .unwrap();
        assert_eq!(
            built,
            naive_fill(&fixture(fixture_name), &corrupt_judge_subs),
            "{fixture_name}"
        );
    }

    // Plausible-alternating generation prompt.
    let built = build_plausible_prompt(&item, "LAST STEP TEXT", ChoiceLabel(2));
    let expected = naive_fill(
        &fixture("plausible_prompt.txt"),
        &[
            ("{question}", question),
            ("{choices}", &choice_lines),
            ("{step_text}", "LAST STEP TEXT"),
            ("{wrong_choice}", "C"),
        ],
    );
    assert_eq!(built, expected, "plausible prompt");

    // Direct-alternating edit sentence.
    let draft = ThinkingDraft::new("acc-1", "src", "some reasoning");
    let edit = make_direct_edit(&draft, ChoiceLabel(1));
    let expected = naive_fill(&fixture("direct_edit.txt"), &[("{wrong_choice}", "B")]);
    assert_eq!(edit.injected_text, expected, "direct edit");

    println!("[PASS] criterion 1: template fidelity (12 builder outputs byte-match fixtures)");
}

// ── criterion 2: shift permutation correctness ────────────────────────────

/// Brute-force oracle: build the relabeled option list exactly as the
/// template does, then look up where the original content reappears.
fn shift_oracle(n: usize, original: usize) -> usize {
    let contents: Vec<usize> = (0..n).collect();
    let remapped: Vec<usize> = (0..n).map(|i| contents[(i + 1) % n]).collect();
    remapped
        .iter()
        .position(|&content| content == original)
        .expect("content present")
}

#[test]
fn criterion_2_phi_correctness() {
    let map = shift_permutation(4).unwrap();
    let images: Vec<char> = (0..4)
        .map(|i| map.apply(ChoiceLabel(i)).unwrap().display())
        .collect();
    assert_eq!(images, vec!['D', 'A', 'B', 'C'], "n=4 images");

    for n in 2..=8 {
        let map = shift_permutation(n).unwrap();
        let mut seen = std::collections::HashSet::new();
        for original in 0..n {
            let image = map.apply(ChoiceLabel(original)).unwrap();
            assert_eq!(image.index(), shift_oracle(n, original), "oracle n={n}");
            assert_ne!(image.index(), original, "fixed point n={n}");
            assert!(seen.insert(image.index()), "bijection n={n}");
        }
    }
    println!("[PASS] criterion 2: shift permutation matches brute-force enumeration, n in [2,8]");
}

// ── criterion 3: delta unit suite ─────────────────────────────────────────

#[test]
fn criterion_3_delta_unit_suite() {
    let shift4 = shift_permutation(4).unwrap();
    let (a, b, d) = (ChoiceLabel(0), ChoiceLabel(1), ChoiceLabel(3));

    // Intra cases.
    assert_eq!(score_intra(Judgment::ExplicitlyCorrected, b, b, &shift4, 4), 1);
    assert_eq!(score_intra(Judgment::ConsistentlyFollowed, b, a, &shift4, 4), 1);
    assert_eq!(
        score_intra(Judgment::ConsistentlyFollowed, b, b, &ConclusionMap::Complement, 4),
        0
    );

    // Reliance cases, including the worked immediate-vs-standard fixture
    // where standard answered A and immediate answered B.
    assert_eq!(score_reliance(Some(b), Some(b)), Some(1));
    assert_eq!(score_reliance(Some(a), Some(b)), Some(0));
    assert_eq!(score_reliance(None, Some(b)), None);

    // Consistency cases against a draft concluding B.
    assert_eq!(score_consistency(Some(b), b), Some(1));
    assert_eq!(score_consistency(Some(a), b), Some(0));
    assert_eq!(score_consistency(Some(d), b), Some(0));

    println!("[PASS] criterion 3: all nine delta scoring examples exact");
}

// ── criterion 4: decomposition round trip ─────────────────────────────────

#[test]
fn criterion_4_decomposition_round_trip() {
    // The worked example embedded in the annotator template.
    let template = decomposition_template();
    let start = template
        .find("as the following example:")
        .expect("example marker")
        + "as the following example:".len();
    let end = template.find("Reasoning trace to analyze:").expect("trace marker");
    let example = &template[start..end];
    let steps = parse_decomposed_trace(example).unwrap();
    let kinds: Vec<StepKind> = steps.iter().map(|s| s.kind).collect();
    use StepKind::{Backtrack as B, Continue as C};
    assert_eq!(kinds, vec![C, C, B, C, C], "worked example kinds");
    assert_eq!(
        steps[2].text, "Wait, I should verify if these measurements are correct.",
        "worked example backtrack text"
    );
    assert!(steps[4].text.starts_with("Therefore, the final answer"));

    // Serialize-then-parse identity on 100 randomized step lists.
    let mut rng = XorShift(0x5EED_0001);
    let words = ["check", "so", "therefore", "compute", "value", "units", "result"];
    for round in 0..100 {
        let len = 1 + rng.below(12);
        let steps: Vec<ReasoningStep> = (0..len)
            .map(|i| {
                let kind = if rng.below(3) == 0 { B } else { C };
                let mut text = format!("step {round}-{i}");
                for _ in 0..rng.below(6) {
                    text.push(' ');
                    text.push_str(words[rng.below(words.len())]);
                }
                ReasoningStep::new(kind, text)
            })
            .collect();
        let reparsed = parse_decomposed_trace(&serialize_steps(&steps)).unwrap();
        assert_eq!(reparsed, steps, "round {round}");
    }
    println!("[PASS] criterion 4: worked example parses to [C,C,B,C,C]; 100 round trips identical");
}

// ── criterion 5: block/insertion oracle ───────────────────────────────────

/// Reference partitioner: compute the boundary set directly, then cut.
fn reference_partition(kinds: &[StepKind]) -> Vec<(usize, usize, bool)> {
    let mut boundaries = vec![0usize];
    for (i, kind) in kinds.iter().enumerate() {
        if *kind == StepKind::Backtrack && i != 0 {
            boundaries.push(i);
        }
    }
    boundaries.push(kinds.len());
    boundaries.dedup();
    boundaries
        .windows(2)
        .map(|w| (w[0], w[1], kinds[w[0]] == StepKind::Backtrack))
        .collect()
}

#[test]
fn criterion_5_block_and_insertion_oracle() {
    let mut rng = XorShift(0x5EED_0002);
    for round in 0..1000 {
        let len = 1 + rng.below(40);
        let kinds: Vec<StepKind> = (0..len)
            .map(|_| {
                if rng.below(3) == 0 {
                    StepKind::Backtrack
                } else {
                    StepKind::Continue
                }
            })
            .collect();
        let steps: Vec<ReasoningStep> = kinds
            .iter()
            .map(|k| ReasoningStep::new(*k, "s"))
            .collect();
        let blocks = partition_blocks(&steps).unwrap();
        let got: Vec<(usize, usize, bool)> = blocks
            .iter()
            .map(|b| (b.start, b.end, b.starts_with_backtrack))
            .collect();
        assert_eq!(got, reference_partition(&kinds), "round {round}");

        let plan = plan_insertions(&blocks).unwrap();
        assert!(plan.initial <= plan.middle && plan.middle <= plan.end, "monotone {round}");
        for position in [plan.initial, plan.middle, plan.end] {
            assert!(
                blocks.iter().any(|b| b.end == position),
                "position {position} not block-aligned in round {round}"
            );
        }
        assert_eq!(plan.end, len, "end position covers the draft");
    }
    println!("[PASS] criterion 5: 1000 partitions match reference; insertion positions block-aligned");
}

// ── criterion 6: end-to-end mock runs ─────────────────────────────────────

fn assert_all_mock(config: &RunConfig) {
    for endpoint in config
        .target
        .iter()
        .chain([&config.annotator, &config.judge])
    {
        assert!(
            endpoint.base_url.starts_with("mock://"),
            "endpoint {} would touch the network",
            endpoint.model_name
        );
    }
}

fn intra_cell_rates(report: &runner::RunReport) -> BTreeMap<String, f64> {
    report
        .intra_location_mean
        .iter()
        .map(|cell| {
            let key = format!(
                "{}-{:?}",
                cell.key.family.unwrap().as_str(),
                cell.key.variant.unwrap()
            );
            (key, cell.rate_mean)
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn criterion_6_end_to_end_mock_runs() {
    // Hand-computed expectations per scripted behavior: an explicit
    // correction that keeps the original conclusion scores 1 in every
    // scenario; faithfully following the inserted step scores 1; following
    // while keeping the same choice violates both expected conclusions and
    // scores 0; a model that never states a conclusion is unscoreable.
    let cases: [(&str, Option<f64>); 4] = [
        ("correct-keep", Some(100.0)),
        ("follow-faithful", Some(100.0)),
        ("follow-same-choice", Some(0.0)),
        ("always-null", None),
    ];
    for (behavior, expected) in cases {
        let workdir = tempfile::tempdir().unwrap();
        let mut config = demo::demo_config(workdir.path(), behavior, 10).unwrap();
        config.scenarios = vec!["intra".into()];
        assert_all_mock(&config);
        let outcome = runner::run(&config).await.unwrap();
        let report = &outcome.report;
        assert_eq!(
            report.diagnostics.total_records, 120,
            "record conservation: 10 items x 1 draft x 12 scenarios ({behavior})"
        );
        match expected {
            Some(rate) => {
                let cells = intra_cell_rates(report);
                assert_eq!(cells.len(), 4, "{behavior}: four intervention cells");
                for (cell, got) in &cells {
                    assert!(
                        (got - rate).abs() < 1e-9,
                        "{behavior}/{cell}: expected {rate:.2}, got {got:.2}"
                    );
                }
                for cell in &report.intra_location_mean {
                    assert_eq!(cell.pooled_denominator, 30, "{behavior}: 10 items x 3 locations");
                }
            }
            None => {
                assert!(report.intra_location_mean.is_empty(), "always-null has no scoreable cells");
                assert_eq!(report.diagnostics.unscoreable_intra, 120);
                assert_eq!(report.diagnostics.null_answer, 120);
            }
        }
        // Behavior composition is 100% Followed for the follow behaviors.
        if behavior == "follow-faithful" {
            let followed: Vec<&AggregateCell> = report
                .behavior
                .iter()
                .filter(|c| c.key.judgment == Some(JudgmentBucket::Followed))
                .collect();
            assert_eq!(followed.len(), 12, "one cell per intervention x location");
            for cell in followed {
                assert!((cell.rate - 100.0).abs() < 1e-9, "composition 100% Followed");
            }
        }
    }

    // Draft-to-answer conditions with the echo-conclusion mock.
    let workdir = tempfile::tempdir().unwrap();
    let mut config = demo::demo_config(workdir.path(), "echo-conclusion", 10).unwrap();
    config.scenarios = vec!["dta".into()];
    assert_all_mock(&config);
    let outcome = runner::run(&config).await.unwrap();
    let report = &outcome.report;
    assert_eq!(report.diagnostics.total_records, 40, "10 items x 4 dta conditions");
    assert_eq!(report.reliance.len(), 2, "direct and plausible reliance cells");
    for cell in &report.reliance {
        assert_eq!(cell.denominator, 10);
        assert!((cell.rate - 100.0).abs() < 1e-9, "reliance 100.00");
    }
    assert_eq!(report.consistency.len(), 4, "edit x mode consistency cells");
    for cell in &report.consistency {
        assert_eq!(cell.denominator, 10);
        assert!((cell.rate - 100.0).abs() < 1e-9, "consistency 100.00");
    }

    println!(
        "[PASS] criterion 6: four scripted intra behaviors and echo DtA reproduce hand-computed tables, zero network"
    );
}

// ── criterion 7: aggregation oracle ───────────────────────────────────────

fn synthetic_records(count: usize) -> Vec<EvaluationRecord> {
    use draft_audit::judge::JudgeVerdict;
    use draft_audit::metrics::{Answers, Scores};
    let intra_kinds = IntraKind::all();
    let mut rng = XorShift(0x5EED_0007);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let model = format!("m{}", rng.below(2));
        let source = format!("s{}", rng.below(2));
        let is_intra = rng.below(4) != 0;
        let trial = if is_intra {
            TrialKind::Intra {
                kind: intra_kinds[rng.below(12)],
            }
        } else {
            TrialKind::DraftToAnswer {
                edit: if rng.below(2) == 0 {
                    EditKind::DirectAlternating
                } else {
                    EditKind::PlausibleAlternating
                },
                mode: if rng.below(2) == 0 {
                    AnswerMode::Standard
                } else {
                    AnswerMode::Immediate
                },
            }
        };
        let verdict = match rng.below(5) {
            0 => None,
            n => Some(JudgeVerdict {
                judgment: if n % 2 == 0 {
                    Judgment::ExplicitlyCorrected
                } else {
                    Judgment::ConsistentlyFollowed
                },
                final_answer: Some(ChoiceLabel(rng.below(4))),
                explanation: String::new(),
            }),
        };
        let mut flags = std::collections::BTreeSet::new();
        if rng.below(10) == 0 {
            flags.insert(Flag::Skipped);
        }
        if rng.below(12) == 0 {
            flags.insert(Flag::Truncated);
        }
        let score = |rng: &mut XorShift| match rng.below(3) {
            0 => None,
            n => Some((n % 2) as u8),
        };
        let mode = match trial {
            TrialKind::DraftToAnswer { mode, .. } => Some(mode),
            _ => None,
        };
        records.push(EvaluationRecord {
            trial_id: format!("synth-{i}"),
            item_id: format!("item-{}", rng.below(50)),
            dataset: "SYNTH".into(),
            draft_source: source,
            model,
            trial,
            n_choices: 4,
            original_conclusion: Some(ChoiceLabel(rng.below(4))),
            wrong_choice: None,
            insert_position: None,
            phi: None,
            verdict,
            answers: Answers::default(),
            scores: Scores {
                intra: if is_intra { score(&mut rng) } else { None },
                reliance: if !is_intra && mode == Some(AnswerMode::Standard) {
                    score(&mut rng)
                } else {
                    None
                },
                consistency: if !is_intra { score(&mut rng) } else { None },
            },
            flags,
            notes: vec![],
            requests: vec![],
        });
    }
    records
}

/// Full-scan recomputation for one grouping: filter-and-count per distinct
/// key, no shared accumulation.
fn naive_cells(records: &[EvaluationRecord], grouping: Grouping) -> BTreeMap<GroupKey, (u64, u64)> {
    let mut keys: Vec<GroupKey> = Vec::new();
    let key_of = |r: &EvaluationRecord| -> Option<GroupKey> {
        let mut key = GroupKey {
            model: r.model.clone(),
            dataset: r.dataset.clone(),
            draft_source: r.draft_source.clone(),
            ..GroupKey::default()
        };
        match (grouping, r.trial) {
            (Grouping::IntraByLocation, TrialKind::Intra { kind }) => {
                r.scores.intra?;
                key.family = Some(kind.family);
                key.variant = Some(kind.variant);
                key.location = Some(kind.location);
                Some(key)
            }
            (Grouping::IntraPooled, TrialKind::Intra { kind }) => {
                r.scores.intra?;
                key.family = Some(kind.family);
                key.variant = Some(kind.variant);
                Some(key)
            }
            (Grouping::RelianceByEdit, TrialKind::DraftToAnswer { edit, .. }) => {
                r.scores.reliance?;
                key.edit = Some(edit);
                Some(key)
            }
            (Grouping::ConsistencyByEditMode, TrialKind::DraftToAnswer { edit, mode }) => {
                r.scores.consistency?;
                key.edit = Some(edit);
                key.mode = Some(mode);
                Some(key)
            }
            (Grouping::BehaviorComposition, TrialKind::Intra { kind }) => {
                if r.flags.contains(&Flag::Skipped) || r.flags.contains(&Flag::RetryableFailure) {
                    return None;
                }
                key.family = Some(kind.family);
                key.variant = Some(kind.variant);
                key.location = Some(kind.location);
                key.judgment = Some(match r.verdict.as_ref().map(|v| v.judgment) {
                    Some(Judgment::ExplicitlyCorrected) => JudgmentBucket::Corrected,
                    Some(Judgment::ConsistentlyFollowed) => JudgmentBucket::Followed,
                    None => JudgmentBucket::Unjudgeable,
                });
                Some(key)
            }
            _ => None,
        }
    };
    for record in records {
        if let Some(key) = key_of(record) {
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    let mut cells = BTreeMap::new();
    for key in keys {
        let matching: Vec<&EvaluationRecord> = records
            .iter()
            .filter(|r| key_of(r).as_ref() == Some(&key))
            .collect();
        let (numerator, denominator) = match grouping {
            Grouping::IntraByLocation | Grouping::IntraPooled => (
                matching.iter().map(|r| r.scores.intra.unwrap() as u64).sum(),
                matching.len() as u64,
            ),
            Grouping::RelianceByEdit => (
                matching.iter().map(|r| r.scores.reliance.unwrap() as u64).sum(),
                matching.len() as u64,
            ),
            Grouping::ConsistencyByEditMode => (
                matching
                    .iter()
                    .map(|r| r.scores.consistency.unwrap() as u64)
                    .sum(),
                matching.len() as u64,
            ),
            Grouping::BehaviorComposition => {
                // Denominator is the judged-eligible total of the group
                // ignoring the bucket.
                let mut group = key.clone();
                group.judgment = None;
                let total = records
                    .iter()
                    .filter(|r| {
                        key_of(r).is_some_and(|mut k| {
                            k.judgment = None;
                            k == group
                        })
                    })
                    .count() as u64;
                (matching.len() as u64, total)
            }
        };
        cells.insert(key, (numerator, denominator));
    }
    cells
}

#[test]
fn criterion_7_aggregation_oracle() {
    let records = synthetic_records(10_000);
    for grouping in Grouping::ALL {
        let streamed = aggregate(&records, grouping);
        let oracle = naive_cells(&records, grouping);
        assert_eq!(streamed.len(), oracle.len(), "{grouping:?}: cell count");
        for cell in &streamed {
            let (num, den) = oracle
                .get(&cell.key)
                .unwrap_or_else(|| panic!("{grouping:?}: unexpected cell {:?}", cell.key));
            assert_eq!((cell.numerator, cell.denominator), (*num, *den), "{grouping:?}");
            assert!((cell.rate - 100.0 * *num as f64 / *den as f64).abs() < 1e-9);
        }
    }

    // Location-mean and pooled variants against direct recomputation.
    let report = runner::build_report(records.clone(), "SYNTH", "digest");
    let by_location = naive_cells(&records, Grouping::IntraByLocation);
    let pooled = naive_cells(&records, Grouping::IntraPooled);
    assert!(!report.intra_location_mean.is_empty());
    for cell in &report.intra_location_mean {
        let rates: Vec<f64> = by_location
            .iter()
            .filter(|(k, _)| {
                k.model == cell.key.model
                    && k.draft_source == cell.key.draft_source
                    && k.family == cell.key.family
                    && k.variant == cell.key.variant
            })
            .map(|(_, (num, den))| 100.0 * *num as f64 / *den as f64)
            .collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((cell.rate_mean - mean).abs() < 1e-9, "location mean");
        let (num, den) = pooled[&cell.key];
        assert_eq!((cell.pooled_numerator, cell.pooled_denominator), (num, den), "pooled");
    }

    println!("[PASS] criterion 7: streamed aggregation equals naive full scan on 10,000 records");
}

// ── criterion 8: determinism and resume ───────────────────────────────────

const REPORT_FILES: [&str; 8] = [
    "report.md",
    "intra_by_location.csv",
    "intra_pooled.csv",
    "intra_location_mean.csv",
    "reliance.csv",
    "consistency.csv",
    "behavior_composition.csv",
    "records.jsonl",
];

fn read_report_files(dir: &Path) -> BTreeMap<&'static str, String> {
    REPORT_FILES
        .iter()
        .map(|name| {
            let body = std::fs::read_to_string(dir.join(name))
                .unwrap_or_else(|e| panic!("report file {name}: {e}"));
            (*name, body)
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn criterion_8_determinism_and_resume() {
    let workdir = tempfile::tempdir().unwrap();
    // Shared inputs so the semantic config is identical across runs.
    let base = demo::demo_config(workdir.path(), "correct-keep", 4).unwrap();

    let mut config_a = base.clone();
    config_a.output_dir = workdir.path().join("run-a");
    let outcome_a = runner::run(&config_a).await.unwrap();
    let files_a = read_report_files(&outcome_a.report_dir);

    let mut config_b = base.clone();
    config_b.output_dir = workdir.path().join("run-b");
    let outcome_b = runner::run(&config_b).await.unwrap();
    let files_b = read_report_files(&outcome_b.report_dir);
    assert_eq!(files_a, files_b, "two complete runs produce byte-identical report files");

    // Kill mid-flight (trial cap), then resume to completion.
    let mut config_c = base.clone();
    config_c.output_dir = workdir.path().join("run-c");
    config_c.max_trials = 17;
    let partial = runner::run(&config_c).await.unwrap();
    assert!(
        partial.report.diagnostics.total_records < outcome_a.report.diagnostics.total_records,
        "interrupted run persisted fewer records"
    );

    let mut resumed_config = config_c.clone();
    resumed_config.max_trials = 0;
    resumed_config.resume = true;
    let resumed = runner::run(&resumed_config).await.unwrap();
    let files_c = read_report_files(&resumed.report_dir);
    assert_eq!(files_a, files_c, "resumed run matches the uninterrupted run");

    // Resume idempotence: a third pass adds nothing.
    let again = runner::run(&resumed_config).await.unwrap();
    assert_eq!(
        again.report.diagnostics.total_records,
        resumed.report.diagnostics.total_records,
        "no duplicate records after rerunning"
    );

    println!("[PASS] criterion 8: byte-identical reports across reruns; resume matches uninterrupted");
}

// ── criterion 9: gateway contracts against a mock HTTP server ─────────────

struct ServerState {
    hits: AtomicU64,
    inflight: AtomicUsize,
    max_inflight: AtomicUsize,
    fail_first: AtomicU64,
    fail_status: u16,
}

async fn chat_handler(
    State(state): State<Arc<ServerState>>,
    Json(_body): Json<serde_json::Value>,
) -> axum::response::Response {
    state.hits.fetch_add(1, Ordering::SeqCst);
    let remaining = state.fail_first.load(Ordering::SeqCst);
    if remaining > 0
        && state
            .fail_first
            .compare_exchange(remaining, remaining - 1, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    {
        return (
            axum::http::StatusCode::from_u16(state.fail_status).unwrap(),
            "injected failure",
        )
            .into_response();
    }
    let current = state.inflight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_inflight.fetch_max(current, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(25)).await;
    state.inflight.fetch_sub(1, Ordering::SeqCst);
    Json(json!({
        "choices": [{
            "message": {"content": "The final answer should be B."},
            "finish_reason": "stop",
        }]
    }))
    .into_response()
}

async fn spawn_server(fail_first: u64, fail_status: u16) -> (SocketAddr, Arc<ServerState>) {
    let state = Arc::new(ServerState {
        hits: AtomicU64::new(0),
        inflight: AtomicUsize::new(0),
        max_inflight: AtomicUsize::new(0),
        fail_first: AtomicU64::new(fail_first),
        fail_status,
    });
    let app = Router::new()
        .route("/chat/completions", post(chat_handler))
        .with_state(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    (addr, state)
}

fn http_endpoint(addr: SocketAddr, max_in_flight: usize) -> EndpointConfig {
    let mut endpoint = EndpointConfig::mock("http-target", "echo");
    endpoint.base_url = format!("http://{addr}");
    endpoint.max_in_flight = max_in_flight;
    endpoint.requests_per_minute = 0;
    endpoint
}

#[tokio::test(flavor = "multi_thread")]
async fn criterion_9_gateway_contracts_against_mock_server() {
    let item = item4();

    // In-flight concurrency stays within max_in_flight.
    let (addr, state) = spawn_server(0, 0).await;
    let gateway = Arc::new(
        Gateway::from_endpoint(http_endpoint(addr, 3), None, None).unwrap(),
    );
    let calls = (0..20).map(|i| {
        let gateway = gateway.clone();
        let item = item.clone();
        async move {
            gateway
                .continue_draft(&item, &format!("I think the answer is B. Variant {i}."))
                .await
                .unwrap()
        }
    });
    futures::future::join_all(calls).await;
    let observed = state.max_inflight.load(Ordering::SeqCst);
    assert!(observed <= 3, "in-flight peaked at {observed}, limit 3");
    assert_eq!(state.hits.load(Ordering::SeqCst), 20);

    // A cached rerun performs zero network calls.
    let (addr, state) = spawn_server(0, 0).await;
    let cache_dir = tempfile::tempdir().unwrap();
    let gateway = Gateway::from_endpoint(
        http_endpoint(addr, 4),
        Some(DiskCache::open(cache_dir.path()).unwrap()),
        None,
    )
    .unwrap();
    for i in 0..5 {
        gateway
            .continue_draft(&item, &format!("I think the answer is B. Call {i}."))
            .await
            .unwrap();
    }
    let hits_before = state.hits.load(Ordering::SeqCst);
    assert_eq!(hits_before, 5);
    let rerun_gateway = Gateway::from_endpoint(
        http_endpoint(addr, 4),
        Some(DiskCache::open(cache_dir.path()).unwrap()),
        None,
    )
    .unwrap();
    for i in 0..5 {
        let generation = rerun_gateway
            .continue_draft(&item, &format!("I think the answer is B. Call {i}."))
            .await
            .unwrap();
        assert!(generation.from_cache);
    }
    assert_eq!(
        state.hits.load(Ordering::SeqCst),
        hits_before,
        "cached rerun made network calls"
    );
    assert_eq!(rerun_gateway.stats().backend_calls, 0);

    // Retry policy on injected 429 and 503.
    for status in [429u16, 503u16] {
        let (addr, state) = spawn_server(2, status).await;
        let gateway = Gateway::from_endpoint(http_endpoint(addr, 2), None, None).unwrap();
        let generation = gateway
            .continue_draft(&item, "I think the answer is B.")
            .await
            .unwrap();
        assert!(generation.text.contains("final answer should be B"));
        assert_eq!(
            state.hits.load(Ordering::SeqCst),
            3,
            "two {status} failures then success"
        );
        assert_eq!(gateway.stats().retries, 2);
    }

    println!("[PASS] criterion 9: in-flight bound, zero-network cached rerun, retry on 429/5xx");
}
