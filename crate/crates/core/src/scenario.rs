//! Scenario file loading, validation, and serialization.
//!
//! A scenario file is a single JSON document holding every case:
//! `{"scenarios": [{id, initial_context, patient, tests, truth}, ...]}`.
//! All keys are required and unknown keys are rejected. Validation enforces
//! the invariants the engine and environment rely on, most importantly that
//! no patient-visible text leaks the ground-truth diagnosis.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{normalize_diagnosis, normalize_test_name, GroundTruth, PatientScript, TestTable};
use crate::state::Text;

/// One synthetic clinical case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: Text,
    /// The doctor's starting context: what is known about the patient plus a
    /// brief objective. Must not contain the diagnosis.
    pub initial_context: Text,
    pub patient: PatientScript,
    pub tests: TestTable,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenarios: Vec<Scenario>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario document at line {line}, column {column}: {detail}")]
    Parse {
        line: usize,
        column: usize,
        detail: String,
    },
    #[error("scenario '{id}' is invalid: {reason}")]
    Validation { id: String, reason: String },
    #[error("duplicate scenario id '{id}'")]
    DuplicateId { id: String },
}

/// Parse and validate a scenario document from a string.
pub fn parse_scenarios(text: &str) -> Result<Vec<Scenario>, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        detail: e.to_string(),
    })?;
    let mut seen = std::collections::HashSet::new();
    for scenario in &file.scenarios {
        validate_scenario(scenario)?;
        if !seen.insert(scenario.id.clone()) {
            return Err(ScenarioError::DuplicateId {
                id: scenario.id.clone(),
            });
        }
    }
    Ok(file.scenarios)
}

/// Load and validate the scenario file at `path`, preserving file order.
pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenarios(&text)
}

/// Serialize scenarios back into the document format accepted by
/// [`parse_scenarios`] (pretty-printed, trailing newline).
pub fn serialize_scenarios(scenarios: &[Scenario]) -> Text {
    let file = ScenarioFile {
        scenarios: scenarios.to_vec(),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("scenario serialization");
    out.push('\n');
    out
}

fn invalid(id: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        id: id.to_string(),
        reason: reason.into(),
    }
}

/// Check every invariant of a single scenario.
pub fn validate_scenario(scenario: &Scenario) -> Result<(), ScenarioError> {
    let id = &scenario.id;
    if id.trim().is_empty() {
        return Err(invalid(id, "id is empty"));
    }
    if scenario.initial_context.trim().is_empty() {
        return Err(invalid(id, "initial_context is empty"));
    }

    let truth = &scenario.truth;
    if truth.canonical_diagnosis.trim().is_empty() {
        return Err(invalid(id, "canonical_diagnosis is empty"));
    }
    let canonical = normalize_diagnosis(&truth.canonical_diagnosis);
    if canonical.is_empty() {
        return Err(invalid(id, "canonical_diagnosis normalizes to nothing"));
    }
    let mut seen_synonyms = std::collections::HashSet::new();
    for synonym in &truth.synonyms {
        let normalized = normalize_diagnosis(synonym);
        if normalized.is_empty() {
            return Err(invalid(id, format!("synonym '{synonym}' normalizes to nothing")));
        }
        if !seen_synonyms.insert(normalized) {
            return Err(invalid(
                id,
                format!("synonyms not distinct after normalization: '{synonym}'"),
            ));
        }
    }

    if normalize_diagnosis(&scenario.initial_context).contains(&canonical) {
        return Err(invalid(id, "initial_context contains the diagnosis"));
    }

    let patient = &scenario.patient;
    if patient.fallback_reply.trim().is_empty() {
        return Err(invalid(id, "fallback_reply is empty"));
    }
    for (index, rule) in patient.symptom_rules.iter().enumerate() {
        if rule.keywords.is_empty() {
            return Err(invalid(id, format!("symptom rule {index} has no keywords")));
        }
        for keyword in &rule.keywords {
            if keyword.is_empty() {
                return Err(invalid(id, format!("symptom rule {index} has an empty keyword")));
            }
            if *keyword != keyword.to_lowercase() {
                return Err(invalid(
                    id,
                    format!("symptom rule {index} keyword '{keyword}' is not lowercase"),
                ));
            }
        }
        if rule.statement.trim().is_empty() {
            return Err(invalid(id, format!("symptom rule {index} statement is empty")));
        }
        if normalize_diagnosis(&rule.statement).contains(&canonical) {
            return Err(invalid(
                id,
                format!("symptom rule {index} statement contains the diagnosis"),
            ));
        }
    }
    if normalize_diagnosis(&patient.fallback_reply).contains(&canonical) {
        return Err(invalid(id, "fallback_reply contains the diagnosis"));
    }

    let tests = &scenario.tests;
    if tests.default_result.trim().is_empty() {
        return Err(invalid(id, "default_result is empty"));
    }
    for (name, result) in &tests.entries {
        if name.is_empty() {
            return Err(invalid(id, "test table has an empty test name"));
        }
        if *name != normalize_test_name(name) {
            return Err(invalid(
                id,
                format!("test name '{name}' is not in normalized form"),
            ));
        }
        if result.trim().is_empty() {
            return Err(invalid(id, format!("test '{name}' has an empty result")));
        }
    }
    Ok(())
}
