//! Accuracy and cost aggregation over episode results.
//!
//! Tabulation mirrors the benchmark-table convention: one row per scenario,
//! a "Correct answer" column, and per-backend outcome cells that read
//! "Correct" for a solved episode, the submitted wrong diagnosis for a failed
//! one, and "No answer" when no diagnosis was returned. Accuracy is kept as
//! an exact fraction; floats appear only in the mean cost figures.

use indexmap::IndexMap;
use thiserror::Error;

use crate::engine::{EpisodeResult, Outcome, TrialRecord};
use crate::env::GroundTruth;
use crate::policy::classify_action;
use crate::state::{ActionKind, SegmentKind, Text, Verdict};

/// An exact ratio of episode counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
}

impl Fraction {
    /// Render as "10/15 (0.667)": the exact fraction first, then a
    /// three-decimal reading rounded half up.
    pub fn render(&self) -> Text {
        let milli = (self.numerator * 2000 + self.denominator) / (2 * self.denominator);
        format!(
            "{}/{} ({}.{:03})",
            self.numerator,
            self.denominator,
            milli / 1000,
            milli % 1000
        )
    }
}

/// One benchmark row: the task number, its correct answer, and one outcome
/// cell per backend label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportRow {
    pub task_number: usize,
    pub correct_answer: Text,
    pub outcomes: IndexMap<Text, Text>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
    pub accuracy_per_backend: IndexMap<Text, Fraction>,
    pub mean_questions: f64,
    pub mean_tests: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("mismatched scenario sets: {0}")]
    MismatchedScenarioSets(String),
}

/// Questions and tests counted out of one trial's raw transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostCount {
    pub questions: u32,
    pub tests: u32,
}

/// Recount a trial's costs from its transcript by reclassifying every
/// doctor action. Independent of the counts stored on the record, so the
/// two can be checked against each other.
pub fn count_costs(record: &TrialRecord) -> CostCount {
    let mut questions = 0u32;
    let mut tests = 0u32;
    for segment in record.transcript.segments() {
        if segment.kind != SegmentKind::Action {
            continue;
        }
        match classify_action(&segment.content).map(|a| a.kind) {
            Ok(ActionKind::PatientQuestion) => questions += 1,
            Ok(ActionKind::TestRequest) => tests += 1,
            Ok(ActionKind::Diagnosis) | Err(_) => {}
        }
    }
    CostCount { questions, tests }
}

/// The outcome cell for one episode: "Correct", the wrong diagnosis text,
/// or "No answer".
pub fn outcome_cell(episode: &EpisodeResult) -> Text {
    if episode.outcome == Outcome::Solved {
        return "Correct".to_string();
    }
    let Some(last) = episode.trials.last() else {
        return "No answer".to_string();
    };
    match last.return_value.verdict() {
        Verdict::Failed => last
            .return_value
            .incorrect_diagnosis()
            .unwrap_or("Incorrect")
            .to_string(),
        Verdict::NoAnswer | Verdict::BudgetExhausted => "No answer".to_string(),
        Verdict::Ok => "Correct".to_string(),
    }
}

/// Aggregate per-backend episode results into a benchmark report.
///
/// Every backend must cover the same scenarios as `truths`, in the same
/// order; `truths[i]` supplies row i's correct answer.
pub fn tabulate(
    results: &IndexMap<Text, Vec<EpisodeResult>>,
    truths: &[GroundTruth],
) -> Result<BenchmarkReport, ReportError> {
    if truths.is_empty() {
        return Err(ReportError::MismatchedScenarioSets(
            "zero scenarios".to_string(),
        ));
    }
    if results.is_empty() {
        return Err(ReportError::MismatchedScenarioSets(
            "no backend results".to_string(),
        ));
    }
    let reference_ids: Vec<&str> = results[0].iter().map(|e| e.scenario_id.as_str()).collect();
    for (label, episodes) in results {
        if episodes.len() != truths.len() {
            return Err(ReportError::MismatchedScenarioSets(format!(
                "backend '{label}' has {} episodes for {} scenarios",
                episodes.len(),
                truths.len()
            )));
        }
        let ids: Vec<&str> = episodes.iter().map(|e| e.scenario_id.as_str()).collect();
        if ids != reference_ids {
            return Err(ReportError::MismatchedScenarioSets(format!(
                "backend '{label}' covers a different scenario order"
            )));
        }
    }

    let mut rows = Vec::with_capacity(truths.len());
    for (index, truth) in truths.iter().enumerate() {
        let mut outcomes = IndexMap::new();
        for (label, episodes) in results {
            outcomes.insert(label.clone(), outcome_cell(&episodes[index]));
        }
        rows.push(ReportRow {
            task_number: index + 1,
            correct_answer: truth.canonical_diagnosis.clone(),
            outcomes,
        });
    }

    let mut accuracy_per_backend = IndexMap::new();
    for (label, episodes) in results {
        let solved = episodes
            .iter()
            .filter(|e| e.outcome == Outcome::Solved)
            .count() as u64;
        accuracy_per_backend.insert(
            label.clone(),
            Fraction {
                numerator: solved,
                denominator: truths.len() as u64,
            },
        );
    }

    let mut trial_count = 0u64;
    let mut question_sum = 0u64;
    let mut test_sum = 0u64;
    for episodes in results.values() {
        for episode in episodes {
            for trial in &episode.trials {
                trial_count += 1;
                question_sum += u64::from(trial.question_count);
                test_sum += u64::from(trial.test_count);
            }
        }
    }
    let (mean_questions, mean_tests) = if trial_count == 0 {
        (0.0, 0.0)
    } else {
        (
            question_sum as f64 / trial_count as f64,
            test_sum as f64 / trial_count as f64,
        )
    };

    Ok(BenchmarkReport {
        rows,
        accuracy_per_backend,
        mean_questions,
        mean_tests,
    })
}

/// Render a report as fixed-width text or CSV. Equal reports render to
/// identical bytes.
pub fn render_report(report: &BenchmarkReport, format: ReportFormat) -> Text {
    match format {
        ReportFormat::Table => render_table(report),
        ReportFormat::Csv => render_csv(report),
    }
}

fn width(text: &str) -> usize {
    text.chars().count()
}

fn render_table(report: &BenchmarkReport) -> Text {
    let labels: Vec<&Text> = report
        .rows
        .first()
        .map(|row| row.outcomes.keys().collect())
        .unwrap_or_default();
    let mut headers: Vec<String> = vec!["Task".to_string(), "Correct answer".to_string()];
    headers.extend(labels.iter().map(|l| l.to_string()));

    let mut grid: Vec<Vec<String>> = vec![headers];
    for row in &report.rows {
        let mut cells = vec![row.task_number.to_string(), row.correct_answer.clone()];
        cells.extend(row.outcomes.values().cloned());
        grid.push(cells);
    }

    let columns = grid[0].len();
    let mut widths = vec![0usize; columns];
    for row in &grid {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(width(cell));
        }
    }

    let mut out = String::new();
    for (row_index, row) in grid.iter().enumerate() {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str(" | ");
            }
            line.push_str(cell);
            if i + 1 < columns {
                line.push_str(&" ".repeat(widths[i] - width(cell)));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if row_index == 0 {
            let mut divider = String::new();
            for (i, w) in widths.iter().enumerate() {
                if i > 0 {
                    divider.push_str("-+-");
                }
                divider.push_str(&"-".repeat(*w));
            }
            out.push_str(&divider);
            out.push('\n');
        }
    }
    out.push('\n');
    for (label, fraction) in &report.accuracy_per_backend {
        out.push_str(&format!("Accuracy ({label}): {}\n", fraction.render()));
    }
    out.push_str(&format!(
        "Mean questions per trial: {:.3}\n",
        report.mean_questions
    ));
    out.push_str(&format!("Mean tests per trial: {:.3}\n", report.mean_tests));
    out
}

fn render_csv(report: &BenchmarkReport) -> Text {
    let labels: Vec<&Text> = report
        .rows
        .first()
        .map(|row| row.outcomes.keys().collect())
        .unwrap_or_default();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = vec!["task", "correct_answer"];
    header.extend(labels.iter().map(|l| l.as_str()));
    writer.write_record(&header).expect("in-memory csv");
    for row in &report.rows {
        let mut record: Vec<String> = vec![row.task_number.to_string(), row.correct_answer.clone()];
        record.extend(row.outcomes.values().cloned());
        writer.write_record(&record).expect("in-memory csv");
    }
    let bytes = writer.into_inner().expect("in-memory csv flush");
    String::from_utf8(bytes).expect("csv output is utf-8")
}
