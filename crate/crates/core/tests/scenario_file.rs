//! The bundled scenario corpus: shape, ground-truth answers, round-trip
//! stability, and schema strictness against mutated documents.

use clinic_core::env::normalize_diagnosis;
use clinic_core::scenario::{load_scenarios, parse_scenarios, serialize_scenarios, ScenarioError};
use clinic_core::testing::scenarios_path;

const EXPECTED_ANSWERS: [&str; 15] = [
    "Myasthenia gravis",
    "Progressive multifocal encephalopathy",
    "Hirschsprung disease",
    "Diffuse large B-cell lymphoma",
    "Acute interstitial nephritis",
    "Pes anserine bursitis",
    "Situational syncope",
    "Congenital Rubella Infection",
    "Phyllodes tumor",
    "Endometritis",
    "Hemorrhoids",
    "Complex partial seizure",
    "Posterior hip dislocation",
    "Hirschsprung\u{2019}s disease",
    "Rupture of the flexor digitorum profundus tendon at its point of insertion",
];

#[test]
fn bundled_corpus_has_fifteen_cases_with_the_expected_answers() {
    let scenarios = load_scenarios(&scenarios_path()).unwrap();
    assert_eq!(scenarios.len(), 15);
    for (index, scenario) in scenarios.iter().enumerate() {
        assert_eq!(scenario.id, format!("case-{:02}", index + 1));
        assert_eq!(scenario.truth.canonical_diagnosis, EXPECTED_ANSWERS[index]);
    }
}

#[test]
fn the_two_megacolon_cases_share_a_normalized_diagnosis() {
    let scenarios = load_scenarios(&scenarios_path()).unwrap();
    assert_eq!(
        normalize_diagnosis(&scenarios[2].truth.canonical_diagnosis),
        "hirschsprung disease"
    );
    assert_eq!(
        normalize_diagnosis(&scenarios[13].truth.canonical_diagnosis),
        "hirschsprung disease"
    );
}

#[test]
fn corpus_round_trips_through_serialization() {
    let scenarios = load_scenarios(&scenarios_path()).unwrap();
    let text = serialize_scenarios(&scenarios);
    let reparsed = parse_scenarios(&text).unwrap();
    assert_eq!(reparsed, scenarios);
}

#[test]
fn unknown_keys_anywhere_are_rejected() {
    let text = std::fs::read_to_string(scenarios_path()).unwrap();
    let mutated = text.replacen("\"initial_context\"", "\"initial_context_v2\"", 1);
    match parse_scenarios(&mutated) {
        Err(ScenarioError::Parse { line, .. }) => assert!(line > 0),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn duplicated_scenario_ids_are_rejected() {
    let text = std::fs::read_to_string(scenarios_path()).unwrap();
    let mutated = text.replacen("case-02", "case-01", 1);
    match parse_scenarios(&mutated) {
        Err(ScenarioError::DuplicateId { id }) => assert_eq!(id, "case-01"),
        other => panic!("expected a duplicate-id error, got {other:?}"),
    }
}

#[test]
fn leaking_the_answer_into_the_context_is_rejected() {
    let scenarios = load_scenarios(&scenarios_path()).unwrap();
    let mut mutated = scenarios.clone();
    mutated[9].initial_context = format!(
        "{} The team suspects {}.",
        mutated[9].initial_context, mutated[9].truth.canonical_diagnosis
    );
    let text = serialize_scenarios(&mutated);
    match parse_scenarios(&text) {
        Err(ScenarioError::Validation { id, reason }) => {
            assert_eq!(id, "case-10");
            assert!(reason.contains("diagnosis"), "reason was {reason:?}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn every_test_key_is_already_normalized_and_every_scenario_is_solvable_by_name() {
    let scenarios = load_scenarios(&scenarios_path()).unwrap();
    for scenario in &scenarios {
        for key in scenario.tests.entries.keys() {
            assert_eq!(key, &clinic_core::env::normalize_test_name(key));
        }
        assert!(!scenario.truth.canonical_diagnosis.trim().is_empty());
    }
}
