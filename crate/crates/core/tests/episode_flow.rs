//! End-to-end engine behavior on scripted backends: the fail-then-succeed
//! oracle, the compression invariant, budget/termination bounds, moderator
//! equivalence against a brute-force oracle, and persistence round-trips.

use std::collections::HashSet;
use std::time::Instant;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use clinic_core::engine::{compress, Engine, LoopConfig, Outcome, ProgressEvent};
use clinic_core::env::{moderator_evaluate, normalize_diagnosis, EnvBackend};
use clinic_core::policy::{demo_doctor_for, DoctorBackend, ScriptedDoctor, ScriptedDoctorPlan};
use clinic_core::scenario::{load_scenarios, Scenario};
use clinic_core::state::{render_prompt, Return, Role, Verdict};
use clinic_core::testing::{
    case1_baseline_doctor, case1_fail_then_succeed_doctor, scenarios_path, CASE1_REFLECTION,
};
use clinic_core::transcript::{load_transcript, replay_episode, TranscriptWriter};
use clinic_core::env::{GroundTruth, PatientScript, TestTable};

fn bundled_scenarios() -> Vec<Scenario> {
    load_scenarios(&scenarios_path()).expect("bundled scenario file loads")
}

#[test]
fn fail_then_succeed_oracle_on_the_first_scenario() {
    let started = Instant::now();
    let scenarios = bundled_scenarios();
    let scenario = &scenarios[0];
    let doctor = case1_fail_then_succeed_doctor();
    let env = EnvBackend::Scripted;
    let engine = Engine::new(LoopConfig::default(), &doctor, &env);

    let episode = engine
        .run_episode(scenario, &mut |_| {})
        .expect("scripted run cannot fail");

    assert_eq!(episode.trials.len(), 2);
    assert_eq!(episode.outcome, Outcome::Solved);
    assert_eq!(episode.solving_trial, Some(2));
    assert_eq!(episode.trials[0].return_value.verdict(), Verdict::Failed);
    assert_eq!(
        episode.trials[0].return_value.message(),
        "FAILED: diagnosis 'Guillain-Barré Syndrome' is incorrect."
    );
    assert_eq!(episode.trials[1].return_value.verdict(), Verdict::Ok);
    assert_eq!(episode.trials[1].return_value.message(), "OK");

    let adaptation = episode.trials[1]
        .adaptation_used
        .as_ref()
        .expect("trial 2 runs under an adaptation");
    assert_eq!(adaptation.content, CASE1_REFLECTION);
    assert_eq!(adaptation.trial_origin, 1);

    assert!(started.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn adapted_and_baseline_cost_counts_match_the_published_dialogue() {
    let scenarios = bundled_scenarios();
    let scenario = &scenarios[0];
    let env = EnvBackend::Scripted;

    let doctor = case1_fail_then_succeed_doctor();
    let engine = Engine::new(LoopConfig::default(), &doctor, &env);
    let episode = engine.run_episode(scenario, &mut |_| {}).unwrap();
    let adapted = &episode.trials[1];
    assert_eq!(adapted.question_count, 12);
    assert_eq!(adapted.test_count, 1);

    let baseline_doctor = case1_baseline_doctor();
    let config = LoopConfig::new(30, 3).unwrap();
    let engine = Engine::new(config, &baseline_doctor, &env);
    let baseline = engine.run_episode(scenario, &mut |_| {}).unwrap();
    assert_eq!(baseline.outcome, Outcome::Solved);
    assert_eq!(baseline.trials.len(), 1);
    assert_eq!(baseline.trials[0].question_count, 19);
    assert_eq!(baseline.trials[0].test_count, 1);
}

/// A synthetic scenario whose dialogue strings all carry a distinctive tag,
/// so leakage into later prompts is detectable by substring.
fn tagged_scenario(tag: &str) -> Scenario {
    Scenario {
        id: format!("tagged-{tag}"),
        initial_context: format!("CTX-{tag} presenting complaint."),
        patient: PatientScript {
            demographics: format!("DEMO-{tag}"),
            history: format!("HIST-{tag}"),
            symptom_rules: vec![],
            fallback_reply: format!("FALL-{tag}"),
        },
        tests: TestTable {
            entries: indexmap::IndexMap::new(),
            default_result: format!("RESULT-{tag}"),
        },
        truth: GroundTruth {
            canonical_diagnosis: format!("TRUTH-{tag}"),
            synonyms: vec![],
        },
    }
}

fn tagged_doctor(tag: &str, questions: u8, tests: u8) -> DoctorBackend {
    let mut sequence: Vec<String> = Vec::new();
    for i in 0..questions {
        sequence.push(format!("Q{i}-{tag}?"));
    }
    for i in 0..tests {
        sequence.push(format!("REQUEST TEST: T{i}-{tag}"));
    }
    sequence.push(format!("DIAGNOSIS READY: WRONG-{tag}"));
    let texts: Vec<&str> = sequence.iter().map(|s| s.as_str()).collect();
    let plan = ScriptedDoctorPlan::from_texts(&texts, &texts, "never-triggers").unwrap();
    DoctorBackend::Scripted(ScriptedDoctor {
        plan,
        reflection: format!("ADAPT-{tag}"),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Compression invariant: the doctor prompt opening trial 2 carries the
    /// initial context and every adaptation, and none of trial 1's dialogue.
    #[test]
    fn trial_two_prompt_contains_context_and_adaptations_only(
        tag in "[a-z0-9]{12}",
        questions in 0u8..6,
        tests in 0u8..3,
    ) {
        let scenario = tagged_scenario(&tag);
        let doctor = tagged_doctor(&tag, questions, tests);
        let env = EnvBackend::Scripted;
        let config = LoopConfig::new(20, 2).unwrap();
        let engine = Engine::new(config, &doctor, &env);
        let episode = engine.run_episode(&scenario, &mut |_| {}).unwrap();

        prop_assert_eq!(episode.trials.len(), 2);
        let trial1 = &episode.trials[0];
        let adaptation = episode.trials[1].adaptation_used.clone().unwrap();

        let start_of_trial_2 = compress(
            &trial1.transcript,
            &clinic_core::state::State::initial(1, scenario.initial_context.clone()),
            std::slice::from_ref(&adaptation),
        );
        let prompt = render_prompt(&start_of_trial_2, Role::Doctor);

        prop_assert!(prompt.contains(&scenario.initial_context));
        prop_assert!(prompt.contains(&adaptation.content));
        let mut forbidden: Vec<String> = Vec::new();
        for i in 0..questions {
            forbidden.push(format!("Q{}-{}", i, tag));
        }
        for i in 0..tests {
            forbidden.push(format!("T{}-{}", i, tag));
        }
        forbidden.push(format!("WRONG-{}", tag));
        forbidden.push(format!("FALL-{}", tag));
        forbidden.push(format!("RESULT-{}", tag));
        for needle in &forbidden {
            prop_assert!(!prompt.contains(needle), "leaked {} into the prompt", needle);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Budget/termination: total environment steps never exceed
    /// max_trials * max_steps, and BudgetExhausted fires exactly when the
    /// plan cannot reach its diagnosis within the step budget.
    #[test]
    fn episodes_terminate_within_budget(
        plan_len in 1u32..=60,
        max_steps in prop::sample::select(vec![5u32, 20, 50]),
        max_trials in 1u32..=3,
        correct in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let scenario = tagged_scenario("budget");
        let mut sequence: Vec<String> = Vec::new();
        for i in 0..plan_len - 1 {
            if rng.gen_bool(0.3) {
                sequence.push(format!("REQUEST TEST: probe {i}"));
            } else {
                sequence.push(format!("Question {i}?"));
            }
        }
        let final_diagnosis = if correct { "TRUTH-budget" } else { "Off target" };
        sequence.push(format!("DIAGNOSIS READY: {final_diagnosis}"));
        let texts: Vec<&str> = sequence.iter().map(|s| s.as_str()).collect();
        let plan = ScriptedDoctorPlan::from_texts(&texts, &texts, "never-triggers").unwrap();
        let doctor = DoctorBackend::Scripted(ScriptedDoctor {
            plan,
            reflection: "Try a different line of questioning.".to_string(),
        });

        let env = EnvBackend::Scripted;
        let config = LoopConfig::new(max_steps, max_trials).unwrap();
        let engine = Engine::new(config, &doctor, &env);
        let mut env_steps = 0u32;
        let episode = engine
            .run_episode(&scenario, &mut |event| {
                if matches!(event, ProgressEvent::Action { .. }) {
                    env_steps += 1;
                }
            })
            .unwrap();

        prop_assert!(env_steps <= max_trials * max_steps);
        let expect_exhausted = plan_len > max_steps;
        for trial in &episode.trials {
            if expect_exhausted {
                prop_assert_eq!(trial.return_value.verdict(), Verdict::BudgetExhausted);
                prop_assert_eq!(trial.transcript.step_index(), max_steps);
            } else {
                let expected = if correct { Verdict::Ok } else { Verdict::Failed };
                prop_assert_eq!(trial.return_value.verdict(), expected);
                prop_assert_eq!(trial.transcript.step_index(), plan_len);
            }
        }
        if expect_exhausted || !correct {
            prop_assert_eq!(episode.trials.len() as u32, max_trials);
            prop_assert_eq!(episode.outcome, Outcome::Unsolved);
        } else {
            prop_assert_eq!(episode.trials.len(), 1);
            prop_assert_eq!(episode.outcome, Outcome::Solved);
        }
    }
}

/// Mutate a diagnosis string the way messy submissions look: case flips,
/// possessives, apostrophe variants, stray punctuation and whitespace.
fn mutate_diagnosis(rng: &mut StdRng, base: &str) -> String {
    let mut text: String = base
        .chars()
        .map(|c| {
            if rng.gen_bool(0.3) {
                if rng.gen_bool(0.5) {
                    c.to_uppercase().next().unwrap_or(c)
                } else {
                    c.to_lowercase().next().unwrap_or(c)
                }
            } else {
                c
            }
        })
        .collect();
    if rng.gen_bool(0.3) {
        let apostrophe = ['\'', '\u{2019}', '\u{02BC}', '`', '\u{00B4}'][rng.gen_range(0..5)];
        text.push(apostrophe);
        text.push('s');
    }
    if rng.gen_bool(0.3) {
        text = text.replace(' ', ["  ", " - ", ", "][rng.gen_range(0..3)]);
    }
    if rng.gen_bool(0.3) {
        text = format!("  {text}\t");
    }
    if rng.gen_bool(0.2) {
        text.push(['.', '!', '?'][rng.gen_range(0..3)]);
    }
    text
}

fn random_junk(rng: &mut StdRng) -> String {
    let pool: Vec<char> = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 \t'\u{2019}\u{02BC}`\u{00B4}.,-éßñ中文".chars().collect();
    let len = rng.gen_range(0..30);
    (0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

#[test]
fn moderator_agrees_with_the_brute_force_membership_oracle() {
    let scenarios = bundled_scenarios();
    let mut rng = StdRng::seed_from_u64(6);

    for scenario in &scenarios {
        let truth = &scenario.truth;
        let mut accepted: HashSet<String> = HashSet::new();
        accepted.insert(normalize_diagnosis(&truth.canonical_diagnosis));
        for synonym in &truth.synonyms {
            accepted.insert(normalize_diagnosis(synonym));
        }

        for case in 0..1000 {
            let candidate = match case % 4 {
                0 => random_junk(&mut rng),
                1 => mutate_diagnosis(&mut rng, &truth.canonical_diagnosis),
                2 => {
                    if truth.synonyms.is_empty() {
                        mutate_diagnosis(&mut rng, &truth.canonical_diagnosis)
                    } else {
                        let pick = rng.gen_range(0..truth.synonyms.len());
                        mutate_diagnosis(&mut rng, &truth.synonyms[pick])
                    }
                }
                _ => format!(
                    "{} {}",
                    random_junk(&mut rng),
                    mutate_diagnosis(&mut rng, &truth.canonical_diagnosis)
                ),
            };

            let expected = if candidate.trim().is_empty() {
                Return::no_answer()
            } else if accepted.contains(&normalize_diagnosis(&candidate)) {
                Return::ok()
            } else {
                Return::failed(&candidate)
            };
            let actual = moderator_evaluate(&candidate, truth);
            assert_eq!(
                actual.message(),
                expected.message(),
                "scenario {} candidate {candidate:?}",
                scenario.id
            );
        }
    }
}

#[test]
fn replay_equals_live_results_for_every_bundled_scenario() {
    let scenarios = bundled_scenarios();
    let env = EnvBackend::Scripted;
    let dir = tempfile::tempdir().unwrap();

    for scenario in &scenarios {
        let doctor = DoctorBackend::Scripted(demo_doctor_for(scenario));
        let engine = Engine::new(LoopConfig::default(), &doctor, &env);
        let path = dir.path().join(format!("{}.jsonl", scenario.id));
        let mut writer = TranscriptWriter::to_path(scenario.id.clone(), &path, true).unwrap();
        let live = engine
            .run_episode(scenario, &mut |event| writer.record(event))
            .unwrap();
        writer.finish().unwrap();

        let events = load_transcript(&path).unwrap();
        let replayed = replay_episode(&events).unwrap();
        assert_eq!(replayed, live, "replay mismatch for {}", scenario.id);
    }
}

#[test]
fn replay_round_trips_an_adapted_two_trial_episode() {
    let scenarios = bundled_scenarios();
    let scenario = &scenarios[0];
    let doctor = case1_fail_then_succeed_doctor();
    let env = EnvBackend::Scripted;
    let engine = Engine::new(LoopConfig::default(), &doctor, &env);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case-01.jsonl");

    let mut writer = TranscriptWriter::to_path(scenario.id.clone(), &path, true).unwrap();
    let live = engine
        .run_episode(scenario, &mut |event| writer.record(event))
        .unwrap();
    writer.finish().unwrap();

    let replayed = replay_episode(&load_transcript(&path).unwrap()).unwrap();
    assert_eq!(replayed, live);
    assert_eq!(replayed.trials.len(), 2);
    assert_eq!(
        replayed.trials[1].adaptation_used.as_ref().unwrap().content,
        CASE1_REFLECTION
    );
}
